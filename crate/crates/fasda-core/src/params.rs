//! Named parameter collections.
//!
//! Parameters live in a sorted map so every walk over them (optimizer steps,
//! checkpoint serialization, freeze hashing) visits the same order on every
//! run. Names are dotted paths like `dec.att.w` grouped by submodel prefix.

use std::collections::BTreeMap;

use crate::rng::{self, Rng};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Sorted name-to-tensor map of trainable parameters.
pub struct ParamSet<F: Scalar> {
    params: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Clone for ParamSet<F> {
    fn clone(&self) -> Self {
        ParamSet {
            params: self.params.clone(),
        }
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<F>) {
        let prev = self.params.insert(name.to_string(), t);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    /// Fetch by name; panics on a missing name since that is a wiring bug,
    /// not a runtime condition.
    pub fn get(&self, name: &str) -> &Tensor<F> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Matrix initialized U(-1/sqrt(fan_in), 1/sqrt(fan_in)); the handle is
    /// also returned for direct wiring.
    pub fn add_uniform(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut Rng,
    ) -> Tensor<F> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<F> = (0..n)
            .map(|_| lit(rng::uniform(rng, -bound, bound)))
            .collect();
        let t = Tensor::param(shape, data).expect("shape/data agree by construction");
        self.insert(name, t.clone());
        t
    }

    pub fn add_zeros(&mut self, name: &str, shape: Vec<usize>) -> Tensor<F> {
        let n: usize = shape.iter().product();
        let t = Tensor::param(shape, vec![F::zero(); n]).expect("shape/data agree");
        self.insert(name, t.clone());
        t
    }

    /// Same names, same current values, but as constants outside the graph.
    /// Forward passes built from the result produce no gradients for these
    /// parameters, which is how one side is frozen while the other trains.
    pub fn detached(&self) -> ParamSet<F> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.detach()))
                .collect(),
        }
    }

    /// Union of two sets (disjoint names required).
    pub fn merged(&self, other: &ParamSet<F>) -> ParamSet<F> {
        let mut out = self.clone();
        for (k, v) in other.iter() {
            out.insert(k, v.clone());
        }
        out
    }

    /// Subset whose names start with the given dotted prefix.
    pub fn subset(&self, prefix: &str) -> ParamSet<F> {
        ParamSet {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn zero_grads(&self) {
        for t in self.params.values() {
            t.zero_grad();
        }
    }

    /// Add independent U(-scale, scale) noise to every element. Gradient
    /// checks use this to push zero-initialized biases off their symmetric
    /// points, where true gradients can cancel to below finite-difference
    /// resolution.
    pub fn jitter_all(&self, rng: &mut Rng, scale: f64) {
        for t in self.params.values() {
            t.with_data_mut(|d| {
                for v in d {
                    *v += lit::<F>(rng::uniform(rng, -scale, scale));
                }
            });
        }
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Plain-data snapshot (name, shape, values) in map order, for
    /// serialization and for shipping parameters across threads.
    pub fn to_raw(&self) -> Vec<(String, Vec<usize>, Vec<F>)> {
        self.params
            .iter()
            .map(|(k, t)| (k.clone(), t.shape().to_vec(), t.values()))
            .collect()
    }

    /// Rebuild a set of gradient-accumulating parameters from a snapshot.
    pub fn from_raw(raw: &[(String, Vec<usize>, Vec<F>)]) -> ParamSet<F> {
        let mut out = ParamSet::new();
        for (name, shape, values) in raw {
            out.insert(
                name,
                Tensor::param(shape.clone(), values.clone()).expect("snapshot shape"),
            );
        }
        out
    }

    /// FNV-1a over names and little-endian element bytes in map order.
    /// Two calls agree exactly iff every stored value is bit-identical, so
    /// this is the freeze contract: hash before, train the other side, hash
    /// after, compare.
    pub fn content_hash(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for (name, t) in &self.params {
            eat(name.as_bytes());
            eat(&[0]);
            let mut buf = Vec::with_capacity(t.len() * F::WIDTH);
            for v in t.values() {
                v.write_le(&mut buf);
            }
            eat(&buf);
        }
        h
    }
}
