//! Gradient-descent optimizers and the finite-difference gradient checker.
//!
//! Optimizers walk a `ParamSet` in its sorted order, update values in place
//! from accumulated gradients, then clear the gradients. A parameter with no
//! gradient is an error: it means the caller stepped a set that the loss
//! never touched, which silently corrupts slot state if ignored.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::params::ParamSet;
use crate::scalar::{lit, wide, Scalar};
use crate::tensor::{backward, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("parameter {0} has no gradient; was it left out of the loss graph?")]
    MissingGrad(String),
    #[error("gradient for {name} is not finite at element {index}")]
    NonFinite { name: String, index: usize },
    #[error("optimizer state mismatch: {0}")]
    State(String),
}

/// Serializable optimizer state for checkpoints: step counter plus zero or
/// more moment vectors per parameter, in a fixed slot order per algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<F: Scalar> {
    pub kind: u8,
    pub step: u64,
    pub slots: BTreeMap<String, Vec<Vec<F>>>,
}

pub trait Optimizer<F: Scalar> {
    /// Apply one update from the gradients currently stored on `params`,
    /// then clear those gradients.
    fn step(&mut self, params: &ParamSet<F>) -> Result<(), OptimError>;

    fn state(&self) -> OptimState<F>;
    fn load_state(&mut self, state: OptimState<F>) -> Result<(), OptimError>;
    fn kind(&self) -> u8;
}

fn take_grad<F: Scalar>(name: &str, t: &Tensor<F>) -> Result<Vec<F>, OptimError> {
    let g = t
        .grad()
        .ok_or_else(|| OptimError::MissingGrad(name.to_string()))?;
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(OptimError::NonFinite {
            name: name.to_string(),
            index: i,
        });
    }
    Ok(g)
}

/// Plain gradient descent: `w -= lr * g`.
pub struct Sgd<F: Scalar> {
    pub lr: F,
    step: u64,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(lr: F) -> Self {
        Sgd { lr, step: 0 }
    }
}

impl<F: Scalar> Optimizer<F> for Sgd<F> {
    fn step(&mut self, params: &ParamSet<F>) -> Result<(), OptimError> {
        for (name, t) in params.iter() {
            let g = take_grad(name, t)?;
            t.with_data_mut(|w| {
                for (wi, gi) in w.iter_mut().zip(&g) {
                    *wi -= self.lr * *gi;
                }
            });
            t.zero_grad();
        }
        self.step += 1;
        Ok(())
    }

    fn state(&self) -> OptimState<F> {
        OptimState {
            kind: 1,
            step: self.step,
            slots: BTreeMap::new(),
        }
    }

    fn load_state(&mut self, state: OptimState<F>) -> Result<(), OptimError> {
        if state.kind != 1 {
            return Err(OptimError::State(format!(
                "expected SGD state (kind 1), got kind {}",
                state.kind
            )));
        }
        self.step = state.step;
        Ok(())
    }

    fn kind(&self) -> u8 {
        1
    }
}

/// Adam with bias correction. Slot order per parameter: `[m, v]`.
pub struct Adam<F: Scalar> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    step: u64,
    m: BTreeMap<String, Vec<F>>,
    v: BTreeMap<String, Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: F) -> Self {
        Adam {
            lr,
            beta1: lit(0.9),
            beta2: lit(0.999),
            eps: lit(1e-8),
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl<F: Scalar> Optimizer<F> for Adam<F> {
    fn step(&mut self, params: &ParamSet<F>) -> Result<(), OptimError> {
        self.step += 1;
        let t = F::from(self.step as f64).unwrap();
        let bc1 = F::one() - self.beta1.powf(t);
        let bc2 = F::one() - self.beta2.powf(t);
        for (name, p) in params.iter() {
            let g = take_grad(name, p)?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![F::zero(); g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![F::zero(); g.len()]);
            if m.len() != g.len() {
                return Err(OptimError::State(format!(
                    "slot length {} does not match gradient length {} for {name}",
                    m.len(),
                    g.len()
                )));
            }
            p.with_data_mut(|w| {
                for i in 0..g.len() {
                    m[i] = self.beta1 * m[i] + (F::one() - self.beta1) * g[i];
                    v[i] = self.beta2 * v[i] + (F::one() - self.beta2) * g[i] * g[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    w[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            });
            p.zero_grad();
        }
        Ok(())
    }

    fn state(&self) -> OptimState<F> {
        let mut slots = BTreeMap::new();
        for (name, m) in &self.m {
            slots.insert(name.clone(), vec![m.clone(), self.v[name].clone()]);
        }
        OptimState {
            kind: 2,
            step: self.step,
            slots,
        }
    }

    fn load_state(&mut self, state: OptimState<F>) -> Result<(), OptimError> {
        if state.kind != 2 {
            return Err(OptimError::State(format!(
                "expected Adam state (kind 2), got kind {}",
                state.kind
            )));
        }
        self.step = state.step;
        self.m.clear();
        self.v.clear();
        for (name, mut vecs) in state.slots {
            if vecs.len() != 2 {
                return Err(OptimError::State(format!(
                    "Adam expects 2 slots per parameter, got {} for {name}",
                    vecs.len()
                )));
            }
            let v = vecs.pop().unwrap();
            let m = vecs.pop().unwrap();
            self.m.insert(name.clone(), m);
            self.v.insert(name, v);
        }
        Ok(())
    }

    fn kind(&self) -> u8 {
        2
    }
}

/// AdaDelta. Slot order per parameter: `[sq_grad, sq_update]`.
pub struct AdaDelta<F: Scalar> {
    pub rho: F,
    pub eps: F,
    step: u64,
    sq_grad: BTreeMap<String, Vec<F>>,
    sq_update: BTreeMap<String, Vec<F>>,
}

impl<F: Scalar> AdaDelta<F> {
    pub fn new() -> Self {
        AdaDelta {
            rho: lit(0.95),
            eps: lit(1e-6),
            step: 0,
            sq_grad: BTreeMap::new(),
            sq_update: BTreeMap::new(),
        }
    }
}

impl<F: Scalar> Default for AdaDelta<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Optimizer<F> for AdaDelta<F> {
    fn step(&mut self, params: &ParamSet<F>) -> Result<(), OptimError> {
        for (name, p) in params.iter() {
            let g = take_grad(name, p)?;
            let sg = self
                .sq_grad
                .entry(name.clone())
                .or_insert_with(|| vec![F::zero(); g.len()]);
            let su = self
                .sq_update
                .entry(name.clone())
                .or_insert_with(|| vec![F::zero(); g.len()]);
            p.with_data_mut(|w| {
                for i in 0..g.len() {
                    sg[i] = self.rho * sg[i] + (F::one() - self.rho) * g[i] * g[i];
                    let delta = ((su[i] + self.eps).sqrt() / (sg[i] + self.eps).sqrt()) * g[i];
                    su[i] = self.rho * su[i] + (F::one() - self.rho) * delta * delta;
                    w[i] -= delta;
                }
            });
            p.zero_grad();
        }
        self.step += 1;
        Ok(())
    }

    fn state(&self) -> OptimState<F> {
        let mut slots = BTreeMap::new();
        for (name, sg) in &self.sq_grad {
            slots.insert(name.clone(), vec![sg.clone(), self.sq_update[name].clone()]);
        }
        OptimState {
            kind: 3,
            step: self.step,
            slots,
        }
    }

    fn load_state(&mut self, state: OptimState<F>) -> Result<(), OptimError> {
        if state.kind != 3 {
            return Err(OptimError::State(format!(
                "expected AdaDelta state (kind 3), got kind {}",
                state.kind
            )));
        }
        self.step = state.step;
        self.sq_grad.clear();
        self.sq_update.clear();
        for (name, mut vecs) in state.slots {
            if vecs.len() != 2 {
                return Err(OptimError::State(format!(
                    "AdaDelta expects 2 slots per parameter, got {} for {name}",
                    vecs.len()
                )));
            }
            let su = vecs.pop().unwrap();
            let sg = vecs.pop().unwrap();
            self.sq_grad.insert(name.clone(), sg);
            self.sq_update.insert(name, su);
        }
        Ok(())
    }

    fn kind(&self) -> u8 {
        3
    }
}

pub fn optimizer_from_kind<F: Scalar>(kind: u8, lr: F) -> Option<Box<dyn Optimizer<F>>> {
    match kind {
        1 => Some(Box::new(Sgd::new(lr))),
        2 => Some(Box::new(Adam::new(lr))),
        3 => Some(Box::new(AdaDelta::new())),
        _ => None,
    }
}

/// Worst element found by [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare backprop gradients against central finite differences for every
/// element of every parameter in `params`.
///
/// The numeric estimate is the fourth-order five-point central stencil
/// `(f(-2e) - 8f(-e) + 8f(e) - f(2e)) / 12e`, which keeps roundoff noise
/// far below the second-order stencil at the same step size. `loss_fn` must
/// rebuild the forward graph from the parameters' current values on each
/// call. Relative error per element is `|a - n| / max(|a|, |n|, 1e-12)`.
/// Intended for tiny models in tests; the cost is four forward passes per
/// perturbed element.
pub fn grad_check<F: Scalar>(
    params: &ParamSet<F>,
    mut loss_fn: impl FnMut() -> Tensor<F>,
    eps: f64,
) -> Result<GradCheckReport, TensorError> {
    params.zero_grads();
    let loss = loss_fn();
    backward(&loss)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };

    for (name, t) in params.iter() {
        let analytic = t.grad().unwrap_or_else(|| vec![F::zero(); t.len()]);
        for i in 0..t.len() {
            let orig = t.values()[i];
            let mut probe = |offset: f64| {
                t.with_data_mut(|d| d[i] = orig + lit(offset));
                wide(loss_fn().item())
            };
            let f_m2 = probe(-2.0 * eps);
            let f_m1 = probe(-eps);
            let f_p1 = probe(eps);
            let f_p2 = probe(2.0 * eps);
            t.with_data_mut(|d| d[i] = orig);

            // Differences first: for an element the loss does not depend on,
            // both differences are exactly zero, whereas the expanded form
            // would leave rounding residue from the 7x intermediate.
            let numeric = (8.0 * (f_p1 - f_m1) - (f_p2 - f_m2)) / (12.0 * eps);
            let a = wide(analytic[i]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    params.zero_grads();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn sgd_moves_against_gradient() {
        let mut p = ParamSet::<f64>::new();
        let w = p.add_zeros("w", vec![2]);
        w.set_data(&[1.0, -1.0]);
        let loss = w.mul(&w).unwrap().sum();
        backward(&loss).unwrap();
        Sgd::new(0.1).step(&p).unwrap();
        let v = w.values();
        assert!((v[0] - 0.8).abs() < 1e-15);
        assert!((v[1] + 0.8).abs() < 1e-15);
        assert!(w.grad().is_none(), "step must clear gradients");
    }

    #[test]
    fn step_without_gradient_is_an_error() {
        let mut p = ParamSet::<f64>::new();
        p.add_zeros("w", vec![2]);
        let err = Sgd::new(0.1).step(&p).unwrap_err();
        assert!(matches!(err, OptimError::MissingGrad(ref n) if n == "w"));
    }

    #[test]
    fn adam_first_step_matches_hand_calculation() {
        // Constant gradient g: after one step the update is
        // lr * g / (|g| + eps) thanks to bias correction.
        let mut p = ParamSet::<f64>::new();
        let w = p.add_zeros("w", vec![1]);
        w.set_data(&[1.0]);
        let loss = w.mul(&w.detach()).unwrap().sum(); // dL/dw = detached copy = 1.0
        backward(&loss).unwrap();
        // g = 1.0 here; expected update lr * 1 / (1 + 1e-8).
        let mut opt = Adam::new(0.001);
        opt.step(&p).unwrap();
        let expect = 1.0 - 0.001 * 1.0 / (1.0 + 1e-8);
        assert!((w.values()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn adam_state_roundtrip_resumes_identically() {
        let run = |resume: bool| -> Vec<f64> {
            let mut p = ParamSet::<f64>::new();
            let w = p.add_zeros("w", vec![3]);
            w.set_data(&[0.5, -0.25, 2.0]);
            let mut opt = Adam::new(0.01);
            for step in 0..10 {
                let loss = w.mul(&w).unwrap().sum();
                backward(&loss).unwrap();
                opt.step(&p).unwrap();
                if resume && step == 4 {
                    let st = opt.state();
                    let mut fresh = Adam::new(0.01);
                    fresh.load_state(st).unwrap();
                    opt = fresh;
                }
            }
            w.values()
        };
        let a = run(false);
        let b = run(true);
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn adadelta_decreases_quadratic() {
        let mut p = ParamSet::<f64>::new();
        let w = p.add_zeros("w", vec![1]);
        w.set_data(&[3.0]);
        let mut opt = AdaDelta::<f64>::new();
        let start = w.values()[0].powi(2);
        for _ in 0..200 {
            let loss = w.mul(&w).unwrap().sum();
            backward(&loss).unwrap();
            opt.step(&p).unwrap();
        }
        assert!(w.values()[0].powi(2) < start);
    }

    #[test]
    fn grad_check_agrees_on_composite_graph() {
        let mut rng = seeded(21);
        let mut p = ParamSet::<f64>::new();
        let w = p.add_uniform("w", vec![4, 4], 4, &mut rng);
        let b = p.add_uniform("b", vec![4], 4, &mut rng);
        let x = Tensor::from_vec(vec![4], vec![0.3, -0.8, 1.2, 0.05]).unwrap();
        let report = grad_check(
            &p,
            || {
                w.matvec(&x)
                    .unwrap()
                    .add(&b)
                    .unwrap()
                    .tanh()
                    .log_softmax()
                    .unwrap()
                    .gather(&[2])
                    .unwrap()
                    .sum()
                    .neg()
            },
            1e-3,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-7,
            "worst {} at {}: analytic {} vs numeric {}",
            report.worst_param,
            report.worst_index,
            report.analytic,
            report.numeric
        );
    }
}
