//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! Define-by-run: every operation on a tracked tensor records its parents and
//! a backward closure on the freshly built node, so the graph is rebuilt each
//! forward pass and variable-length recurrent unrolling needs no special
//! casing. `backward` walks the graph once in reverse topological order and
//! accumulates gradients into every tensor marked `requires_grad`.
//!
//! Tensors are cheap handles (`Rc` inside); cloning a tensor clones the
//! handle, not the buffer. A graph lives on one thread.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid argument: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("data length {got} does not match shape {shape:?} (expect {want})")]
    DataLength {
        shape: Vec<usize>,
        want: usize,
        got: usize,
    },
}

fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T, TensorError> {
    Err(TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

/// Everything a backward closure may look at.
pub(crate) struct BackCtx<'a, F: Scalar> {
    /// Gradient of the loss w.r.t. this node's output.
    pub grad: &'a [F],
    /// Forward output of this node.
    pub out: &'a [F],
    /// Forward data of each parent, in recording order.
    pub parents: &'a [&'a [F]],
}

type BackwardFn<F> = Box<dyn Fn(&BackCtx<'_, F>) -> Vec<Vec<F>>>;

struct Node<F: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<F>>,
    grad: RefCell<Option<Vec<F>>>,
    requires_grad: bool,
    parents: Vec<Tensor<F>>,
    backward: Option<BackwardFn<F>>,
}

/// Dense numeric array with shape; the unit of all differentiable computation.
pub struct Tensor<F: Scalar> {
    node: Rc<Node<F>>,
}

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<F: Scalar> std::fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("data", &*self.node.data.borrow())
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Scalar> Tensor<F> {
    fn new_node(
        shape: Vec<usize>,
        data: Vec<F>,
        requires_grad: bool,
        parents: Vec<Tensor<F>>,
        backward: Option<BackwardFn<F>>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            node: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    /// Leaf constant.
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Result<Self, TensorError> {
        if numel(&shape) != data.len() {
            return Err(TensorError::DataLength {
                want: numel(&shape),
                got: data.len(),
                shape,
            });
        }
        Ok(Self::new_node(shape, data, false, vec![], None))
    }

    /// Leaf that accumulates gradients.
    pub fn param(shape: Vec<usize>, data: Vec<F>) -> Result<Self, TensorError> {
        if numel(&shape) != data.len() {
            return Err(TensorError::DataLength {
                want: numel(&shape),
                got: data.len(),
                shape,
            });
        }
        Ok(Self::new_node(shape, data, true, vec![], None))
    }

    pub fn scalar(v: F) -> Self {
        Self::new_node(vec![], vec![v], false, vec![], None)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self::new_node(shape, vec![F::zero(); n], false, vec![], None)
    }

    /// New leaf sharing this tensor's current values but cut off from the
    /// graph and from gradient accumulation.
    pub fn detach(&self) -> Self {
        Self::new_node(
            self.node.shape.clone(),
            self.node.data.borrow().clone(),
            false,
            vec![],
            None,
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn len(&self) -> usize {
        self.node.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// True when this node is connected to at least one gradient-accumulating
    /// leaf, i.e. operations on it must be recorded.
    pub(crate) fn tracked(&self) -> bool {
        self.node.requires_grad || self.node.backward.is_some()
    }

    pub fn values(&self) -> Vec<F> {
        self.node.data.borrow().clone()
    }

    /// Scalar payload of a one-element tensor.
    pub fn item(&self) -> F {
        let d = self.node.data.borrow();
        assert_eq!(
            d.len(),
            1,
            "item() on tensor of shape {:?}",
            self.node.shape
        );
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<F>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Overwrite the stored values in place (same length required).
    pub fn set_data(&self, new: &[F]) {
        let mut d = self.node.data.borrow_mut();
        assert_eq!(d.len(), new.len());
        d.copy_from_slice(new);
    }

    /// Mutate the stored values in place.
    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut [F]) -> R) -> R {
        f(&mut self.node.data.borrow_mut())
    }

    pub fn with_data<R>(&self, f: impl FnOnce(&[F]) -> R) -> R {
        f(&self.node.data.borrow())
    }

    fn id(&self) -> usize {
        Rc::as_ptr(&self.node) as usize
    }

    fn op(
        shape: Vec<usize>,
        data: Vec<F>,
        parents: Vec<Tensor<F>>,
        backward: BackwardFn<F>,
    ) -> Self {
        if parents.iter().any(Tensor::tracked) {
            Self::new_node(shape, data, false, parents, Some(backward))
        } else {
            // Constant-only input: skip recording so detached forwards build
            // no graph at all.
            Self::new_node(shape, data, false, vec![], None)
        }
    }

    /// Crate-internal custom unary op: caller supplies the forward result
    /// and a gradient map from output grad to parent grad.
    pub(crate) fn make_map_node(
        shape: Vec<usize>,
        data: Vec<F>,
        parent: &Tensor<F>,
        back: impl Fn(&[F]) -> Vec<F> + 'static,
    ) -> Self {
        Tensor::op(
            shape,
            data,
            vec![parent.clone()],
            Box::new(move |ctx| vec![back(ctx.grad)]),
        )
    }

    /// Crate-internal custom three-parent op (input, kernel, bias); the
    /// backward closure sees the output grad plus the first two parents'
    /// forward data and returns all three parent grads.
    pub(crate) fn make_conv_node(
        shape: Vec<usize>,
        data: Vec<F>,
        input: &Tensor<F>,
        kernel: &Tensor<F>,
        bias: &Tensor<F>,
        back: impl Fn(&[F], &[F], &[F]) -> (Vec<F>, Vec<F>, Vec<F>) + 'static,
    ) -> Self {
        Tensor::op(
            shape,
            data,
            vec![input.clone(), kernel.clone(), bias.clone()],
            Box::new(move |ctx| {
                let (dx, dk, db) = back(ctx.grad, ctx.parents[0], ctx.parents[1]);
                vec![dx, dk, db]
            }),
        )
    }

    // ---- elementwise and shape ops --------------------------------------

    /// Elementwise sum; also accepts a rank-1 right operand broadcast over
    /// the leading axis of a rank-2 left operand.
    pub fn add(&self, rhs: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        if self.shape() == rhs.shape() {
            let a = self.node.data.borrow();
            let b = rhs.node.data.borrow();
            let data: Vec<F> = a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect();
            drop(a);
            drop(b);
            return Ok(Tensor::op(
                self.node.shape.clone(),
                data,
                vec![self.clone(), rhs.clone()],
                Box::new(|ctx| vec![ctx.grad.to_vec(), ctx.grad.to_vec()]),
            ));
        }
        if self.rank() == 2 && rhs.rank() == 1 && self.shape()[1] == rhs.shape()[0] {
            let (rows, cols) = (self.shape()[0], self.shape()[1]);
            let a = self.node.data.borrow();
            let b = rhs.node.data.borrow();
            let mut data = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for j in 0..cols {
                    data.push(a[i * cols + j] + b[j]);
                }
            }
            drop(a);
            drop(b);
            return Ok(Tensor::op(
                self.node.shape.clone(),
                data,
                vec![self.clone(), rhs.clone()],
                Box::new(move |ctx| {
                    let mut db = vec![F::zero(); cols];
                    for i in 0..rows {
                        for (j, d) in db.iter_mut().enumerate() {
                            *d += ctx.grad[i * cols + j];
                        }
                    }
                    vec![ctx.grad.to_vec(), db]
                }),
            ));
        }
        shape_err("add", self.shape(), rhs.shape())
    }

    pub fn sub(&self, rhs: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        if self.shape() != rhs.shape() {
            return shape_err("sub", self.shape(), rhs.shape());
        }
        let a = self.node.data.borrow();
        let b = rhs.node.data.borrow();
        let data: Vec<F> = a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect();
        drop(a);
        drop(b);
        Ok(Tensor::op(
            self.node.shape.clone(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|ctx| vec![ctx.grad.to_vec(), ctx.grad.iter().map(|&g| -g).collect()]),
        ))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        if self.shape() != rhs.shape() {
            return shape_err("mul", self.shape(), rhs.shape());
        }
        let a = self.node.data.borrow();
        let b = rhs.node.data.borrow();
        let data: Vec<F> = a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect();
        drop(a);
        drop(b);
        Ok(Tensor::op(
            self.node.shape.clone(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|ctx| {
                let a = ctx.parents[0];
                let b = ctx.parents[1];
                vec![
                    ctx.grad.iter().zip(b).map(|(&g, &y)| g * y).collect(),
                    ctx.grad.iter().zip(a).map(|(&g, &x)| g * x).collect(),
                ]
            }),
        ))
    }

    pub fn scale(&self, c: F) -> Tensor<F> {
        let data: Vec<F> = self.node.data.borrow().iter().map(|&x| x * c).collect();
        Tensor::op(
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| vec![ctx.grad.iter().map(|&g| g * c).collect()]),
        )
    }

    pub fn neg(&self) -> Tensor<F> {
        self.scale(-F::one())
    }

    pub fn tanh(&self) -> Tensor<F> {
        let data: Vec<F> = self.node.data.borrow().iter().map(|&x| x.tanh()).collect();
        Tensor::op(
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(|ctx| {
                vec![ctx
                    .grad
                    .iter()
                    .zip(ctx.out)
                    .map(|(&g, &y)| g * (F::one() - y * y))
                    .collect()]
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor<F> {
        let data: Vec<F> = self
            .node
            .data
            .borrow()
            .iter()
            .map(|&x| {
                // Split on sign to avoid exp overflow.
                if x >= F::zero() {
                    F::one() / (F::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (F::one() + e)
                }
            })
            .collect();
        Tensor::op(
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(|ctx| {
                vec![ctx
                    .grad
                    .iter()
                    .zip(ctx.out)
                    .map(|(&g, &y)| g * y * (F::one() - y))
                    .collect()]
            }),
        )
    }

    /// Natural log, elementwise.
    pub fn ln(&self) -> Tensor<F> {
        let data: Vec<F> = self.node.data.borrow().iter().map(|&x| x.ln()).collect();
        Tensor::op(
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(|ctx| {
                let x = ctx.parents[0];
                vec![ctx.grad.iter().zip(x).map(|(&g, &v)| g / v).collect()]
            }),
        )
    }

    pub fn exp(&self) -> Tensor<F> {
        let data: Vec<F> = self.node.data.borrow().iter().map(|&x| x.exp()).collect();
        Tensor::op(
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(|ctx| vec![ctx.grad.iter().zip(ctx.out).map(|(&g, &y)| g * y).collect()]),
        )
    }

    fn last_axis_rows(&self) -> Result<(usize, usize), TensorError> {
        match self.rank() {
            1 => Ok((1, self.shape()[0])),
            2 => Ok((self.shape()[0], self.shape()[1])),
            _ => Err(TensorError::Invalid {
                op: "softmax",
                msg: format!("rank-1 or rank-2 input required, got {:?}", self.shape()),
            }),
        }
    }

    /// Softmax over the last axis (max-shifted for stability).
    pub fn softmax(&self) -> Result<Tensor<F>, TensorError> {
        let (rows, cols) = self.last_axis_rows()?;
        if cols == 0 {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: "empty axis".into(),
            });
        }
        let x = self.node.data.borrow();
        let mut data = vec![F::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(row[0], F::max);
            let mut sum = F::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                data[r * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                data[r * cols + j] = data[r * cols + j] / sum;
            }
        }
        drop(x);
        Ok(Tensor::op(
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut dx = vec![F::zero(); ctx.grad.len()];
                for r in 0..rows {
                    let s = &ctx.out[r * cols..(r + 1) * cols];
                    let g = &ctx.grad[r * cols..(r + 1) * cols];
                    let dot: F = s.iter().zip(g).map(|(&si, &gi)| si * gi).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = s[j] * (g[j] - dot);
                    }
                }
                vec![dx]
            }),
        ))
    }

    /// Log-softmax over the last axis; the stable route into cross-entropy
    /// style losses.
    pub fn log_softmax(&self) -> Result<Tensor<F>, TensorError> {
        let (rows, cols) = self.last_axis_rows()?;
        if cols == 0 {
            return Err(TensorError::Invalid {
                op: "log_softmax",
                msg: "empty axis".into(),
            });
        }
        let x = self.node.data.borrow();
        let mut data = vec![F::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(row[0], F::max);
            let mut sum = F::zero();
            for &v in row {
                sum += (v - m).exp();
            }
            let lse = m + sum.ln();
            for j in 0..cols {
                data[r * cols + j] = row[j] - lse;
            }
        }
        drop(x);
        Ok(Tensor::op(
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut dx = vec![F::zero(); ctx.grad.len()];
                for r in 0..rows {
                    let ls = &ctx.out[r * cols..(r + 1) * cols];
                    let g = &ctx.grad[r * cols..(r + 1) * cols];
                    let gsum: F = g.iter().cloned().sum();
                    for j in 0..cols {
                        dx[r * cols + j] = g[j] - ls[j].exp() * gsum;
                    }
                }
                vec![dx]
            }),
        ))
    }

    /// Concatenate along the last axis. Rank-1 tensors join end to end;
    /// rank-2 tensors must agree on the leading dimension.
    pub fn concat(&self, rhs: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        match (self.rank(), rhs.rank()) {
            (1, 1) => {
                let (a, b) = (self.shape()[0], rhs.shape()[0]);
                let mut data = self.values();
                data.extend(rhs.values());
                Ok(Tensor::op(
                    vec![a + b],
                    data,
                    vec![self.clone(), rhs.clone()],
                    Box::new(move |ctx| vec![ctx.grad[..a].to_vec(), ctx.grad[a..].to_vec()]),
                ))
            }
            (2, 2) if self.shape()[0] == rhs.shape()[0] => {
                let rows = self.shape()[0];
                let (ca, cb) = (self.shape()[1], rhs.shape()[1]);
                let a = self.node.data.borrow();
                let b = rhs.node.data.borrow();
                let mut data = Vec::with_capacity(rows * (ca + cb));
                for r in 0..rows {
                    data.extend_from_slice(&a[r * ca..(r + 1) * ca]);
                    data.extend_from_slice(&b[r * cb..(r + 1) * cb]);
                }
                drop(a);
                drop(b);
                Ok(Tensor::op(
                    vec![rows, ca + cb],
                    data,
                    vec![self.clone(), rhs.clone()],
                    Box::new(move |ctx| {
                        let mut da = vec![F::zero(); rows * ca];
                        let mut db = vec![F::zero(); rows * cb];
                        for r in 0..rows {
                            let g = &ctx.grad[r * (ca + cb)..(r + 1) * (ca + cb)];
                            da[r * ca..(r + 1) * ca].copy_from_slice(&g[..ca]);
                            db[r * cb..(r + 1) * cb].copy_from_slice(&g[ca..]);
                        }
                        vec![da, db]
                    }),
                ))
            }
            _ => shape_err("concat", self.shape(), rhs.shape()),
        }
    }

    /// Select elements (rank 1) or rows (rank 2) along axis 0.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor<F>, TensorError> {
        let n = self.shape().first().copied().unwrap_or(0);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("index {bad} out of range for axis of size {n}"),
            });
        }
        let idx = indices.to_vec();
        match self.rank() {
            1 => {
                let x = self.node.data.borrow();
                let data: Vec<F> = idx.iter().map(|&i| x[i]).collect();
                drop(x);
                let len = self.shape()[0];
                Ok(Tensor::op(
                    vec![idx.len()],
                    data,
                    vec![self.clone()],
                    Box::new(move |ctx| {
                        let mut dx = vec![F::zero(); len];
                        for (k, &i) in idx.iter().enumerate() {
                            dx[i] += ctx.grad[k];
                        }
                        vec![dx]
                    }),
                ))
            }
            2 => {
                let cols = self.shape()[1];
                let x = self.node.data.borrow();
                let mut data = Vec::with_capacity(idx.len() * cols);
                for &i in &idx {
                    data.extend_from_slice(&x[i * cols..(i + 1) * cols]);
                }
                drop(x);
                let rows = self.shape()[0];
                Ok(Tensor::op(
                    vec![idx.len(), cols],
                    data,
                    vec![self.clone()],
                    Box::new(move |ctx| {
                        let mut dx = vec![F::zero(); rows * cols];
                        for (k, &i) in idx.iter().enumerate() {
                            for j in 0..cols {
                                dx[i * cols + j] += ctx.grad[k * cols + j];
                            }
                        }
                        vec![dx]
                    }),
                ))
            }
            _ => Err(TensorError::Invalid {
                op: "gather",
                msg: format!("rank-1 or rank-2 input required, got {:?}", self.shape()),
            }),
        }
    }

    /// Contiguous slice along axis 0 of a rank-1 tensor.
    pub fn slice(&self, start: usize, len: usize) -> Result<Tensor<F>, TensorError> {
        if self.rank() != 1 || start + len > self.shape()[0] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!(
                    "slice [{start}, {}) out of rank-1 shape {:?}",
                    start + len,
                    self.shape()
                ),
            });
        }
        let total = self.shape()[0];
        let data = self.node.data.borrow()[start..start + len].to_vec();
        Ok(Tensor::op(
            vec![len],
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut dx = vec![F::zero(); total];
                dx[start..start + len].copy_from_slice(ctx.grad);
                vec![dx]
            }),
        ))
    }

    /// Stack rank-1 tensors of equal length into a rank-2 tensor.
    pub fn stack(rows: &[Tensor<F>]) -> Result<Tensor<F>, TensorError> {
        if rows.is_empty() {
            return Err(TensorError::Invalid {
                op: "stack",
                msg: "no rows".into(),
            });
        }
        let cols = rows[0].shape().to_vec();
        if cols.len() != 1 || rows.iter().any(|r| r.shape() != cols.as_slice()) {
            return Err(TensorError::Invalid {
                op: "stack",
                msg: "rows must be rank-1 and same length".into(),
            });
        }
        let k = cols[0];
        let mut data = Vec::with_capacity(rows.len() * k);
        for r in rows {
            data.extend(r.values());
        }
        let n = rows.len();
        Ok(Tensor::op(
            vec![n, k],
            data,
            rows.to_vec(),
            Box::new(move |ctx| {
                (0..n)
                    .map(|r| ctx.grad[r * k..(r + 1) * k].to_vec())
                    .collect()
            }),
        ))
    }

    pub fn sum(&self) -> Tensor<F> {
        let total: F = self.node.data.borrow().iter().cloned().sum();
        let n = self.len();
        Tensor::op(
            vec![],
            vec![total],
            vec![self.clone()],
            Box::new(move |ctx| vec![vec![ctx.grad[0]; n]]),
        )
    }

    pub fn mean(&self) -> Tensor<F> {
        let n = self.len();
        let inv = F::one() / F::from(n).unwrap();
        let total: F = self.node.data.borrow().iter().cloned().sum();
        Tensor::op(
            vec![],
            vec![total * inv],
            vec![self.clone()],
            Box::new(move |ctx| vec![vec![ctx.grad[0] * inv; n]]),
        )
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<F>, TensorError> {
        if numel(&shape) != self.len() {
            return shape_err("reshape", self.shape(), &shape);
        }
        Ok(Tensor::op(
            shape,
            self.values(),
            vec![self.clone()],
            Box::new(|ctx| vec![ctx.grad.to_vec()]),
        ))
    }

    // ---- linear algebra --------------------------------------------------

    /// `[a,b] x [b,c] -> [a,c]`
    pub fn matmul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape()[1] != rhs.shape()[0] {
            return shape_err("matmul", self.shape(), rhs.shape());
        }
        let (a, b, c) = (self.shape()[0], self.shape()[1], rhs.shape()[1]);
        let x = self.node.data.borrow();
        let y = rhs.node.data.borrow();
        let mut data = vec![F::zero(); a * c];
        for i in 0..a {
            for k in 0..b {
                let xv = x[i * b + k];
                for j in 0..c {
                    data[i * c + j] += xv * y[k * c + j];
                }
            }
        }
        drop(x);
        drop(y);
        Ok(Tensor::op(
            vec![a, c],
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |ctx| {
                let x = ctx.parents[0];
                let y = ctx.parents[1];
                // dX = G Y^T, dY = X^T G
                let mut dx = vec![F::zero(); a * b];
                let mut dy = vec![F::zero(); b * c];
                for i in 0..a {
                    for j in 0..c {
                        let g = ctx.grad[i * c + j];
                        for k in 0..b {
                            dx[i * b + k] += g * y[k * c + j];
                            dy[k * c + j] += g * x[i * b + k];
                        }
                    }
                }
                vec![dx, dy]
            }),
        ))
    }

    /// `[a,b] x [b] -> [a]`
    pub fn matvec(&self, rhs: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        if self.rank() != 2 || rhs.rank() != 1 || self.shape()[1] != rhs.shape()[0] {
            return shape_err("matvec", self.shape(), rhs.shape());
        }
        let (a, b) = (self.shape()[0], self.shape()[1]);
        let x = self.node.data.borrow();
        let v = rhs.node.data.borrow();
        let mut data = vec![F::zero(); a];
        for i in 0..a {
            let mut acc = F::zero();
            for k in 0..b {
                acc += x[i * b + k] * v[k];
            }
            data[i] = acc;
        }
        drop(x);
        drop(v);
        Ok(Tensor::op(
            vec![a],
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |ctx| {
                let x = ctx.parents[0];
                let v = ctx.parents[1];
                let mut dx = vec![F::zero(); a * b];
                let mut dv = vec![F::zero(); b];
                for i in 0..a {
                    let g = ctx.grad[i];
                    for k in 0..b {
                        dx[i * b + k] += g * v[k];
                        dv[k] += g * x[i * b + k];
                    }
                }
                vec![dx, dv]
            }),
        ))
    }

    /// `[a] x [a,b] -> [b]`
    pub fn vecmat(&self, rhs: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        if self.rank() != 1 || rhs.rank() != 2 || self.shape()[0] != rhs.shape()[0] {
            return shape_err("vecmat", self.shape(), rhs.shape());
        }
        let (a, b) = (rhs.shape()[0], rhs.shape()[1]);
        let v = self.node.data.borrow();
        let y = rhs.node.data.borrow();
        let mut data = vec![F::zero(); b];
        for i in 0..a {
            let vi = v[i];
            for j in 0..b {
                data[j] += vi * y[i * b + j];
            }
        }
        drop(v);
        drop(y);
        Ok(Tensor::op(
            vec![b],
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |ctx| {
                let v = ctx.parents[0];
                let y = ctx.parents[1];
                let mut dv = vec![F::zero(); a];
                let mut dy = vec![F::zero(); a * b];
                for i in 0..a {
                    let mut acc = F::zero();
                    for j in 0..b {
                        let g = ctx.grad[j];
                        acc += g * y[i * b + j];
                        dy[i * b + j] += v[i] * g;
                    }
                    dv[i] = acc;
                }
                vec![dv, dy]
            }),
        ))
    }
}

/// Sum a non-empty list of same-shape tensors.
pub fn add_all<F: Scalar>(ts: &[Tensor<F>]) -> Result<Tensor<F>, TensorError> {
    let mut it = ts.iter();
    let first = it
        .next()
        .ok_or_else(|| TensorError::Invalid {
            op: "add_all",
            msg: "empty list".into(),
        })?
        .clone();
    it.try_fold(first, |acc, t| acc.add(t))
}

/// Populate gradients of every `requires_grad` tensor reachable from `loss`.
///
/// Gradients accumulate across calls until `zero_grad` is invoked on the
/// tensors (the optimizer does this after each step).
pub fn backward<F: Scalar>(loss: &Tensor<F>) -> Result<(), TensorError> {
    if loss.len() != 1 {
        return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
    }

    // Iterative post-order DFS: parents land before their consumers.
    let mut order: Vec<Tensor<F>> = Vec::new();
    let mut visited: HashSet<usize> = HashSet::new();
    let mut stack: Vec<(Tensor<F>, usize)> = vec![(loss.clone(), 0)];
    visited.insert(loss.id());
    while let Some((t, next_child)) = stack.pop() {
        if next_child < t.node.parents.len() {
            let child = t.node.parents[next_child].clone();
            stack.push((t, next_child + 1));
            if visited.insert(child.id()) {
                stack.push((child, 0));
            }
        } else {
            order.push(t);
        }
    }

    let mut flows: HashMap<usize, Vec<F>> = HashMap::new();
    flows.insert(loss.id(), vec![F::one()]);

    for t in order.iter().rev() {
        let Some(g) = flows.remove(&t.id()) else {
            continue;
        };
        if t.node.requires_grad {
            let mut slot = t.node.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => {
                    for (a, &gi) in acc.iter_mut().zip(&g) {
                        *a += gi;
                    }
                }
                None => *slot = Some(g.clone()),
            }
        }
        if let Some(bw) = &t.node.backward {
            let out_ref = t.node.data.borrow();
            let parent_refs: Vec<std::cell::Ref<'_, Vec<F>>> = t
                .node
                .parents
                .iter()
                .map(|p| p.node.data.borrow())
                .collect();
            let parent_slices: Vec<&[F]> = parent_refs.iter().map(|r| r.as_slice()).collect();
            let contribs = bw(&BackCtx {
                grad: &g,
                out: &out_ref,
                parents: &parent_slices,
            });
            drop(parent_refs);
            drop(out_ref);
            debug_assert_eq!(contribs.len(), t.node.parents.len());
            for (p, c) in t.node.parents.iter().zip(contribs) {
                if !p.tracked() {
                    continue;
                }
                match flows.get_mut(&p.id()) {
                    Some(acc) => {
                        for (a, gi) in acc.iter_mut().zip(c) {
                            *a += gi;
                        }
                    }
                    None => {
                        flows.insert(p.id(), c);
                    }
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn p(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::param(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let eye = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let a = t(&[3, 2], &[1.5, -2.0, 0.25, 4.0, -1.0, 3.0]);
        let out = eye.matmul(&a).unwrap();
        assert_eq!(out.values(), a.values());
    }

    #[test]
    fn matmul_hand_case() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[5.0, 6.0]);
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.values(), vec![17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_op_and_shapes() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn softmax_symmetry_and_simplex() {
        let x = t(&[3], &[0.0, 0.0, 0.0]);
        let s = x.softmax().unwrap().values();
        for v in &s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = t(&[4], &[2.0, -1.0, 0.5, 3.0]).softmax().unwrap().values();
        assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(y.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let x = p(&[4], &[0.3, -1.0, 2.0, 5.5]);
        let loss = x.sum();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn backward_square_gives_two_x() {
        let x = p(&[2], &[1.0, 2.0]);
        let loss = x.mul(&x).unwrap().sum();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = p(&[2], &[1.0, 2.0]);
        assert!(matches!(
            backward(&x).unwrap_err(),
            TensorError::NonScalarLoss(_)
        ));
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let x = p(&[2], &[1.0, 1.0]);
        backward(&x.sum()).unwrap();
        backward(&x.sum()).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn detach_cuts_graph() {
        let x = p(&[2], &[3.0, 4.0]);
        let y = x.scale(2.0).detach();
        let loss = y.sum();
        backward(&loss).unwrap();
        assert!(x.grad().is_none());
        assert_eq!(y.values(), vec![6.0, 8.0]);
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let x = t(&[5], &[0.1, -2.0, 3.0, 0.0, 1.5]);
        let a = x.log_softmax().unwrap().values();
        let b = x.softmax().unwrap().values();
        for (la, sb) in a.iter().zip(b) {
            assert!((la.exp() - sb).abs() < 1e-12);
        }
    }

    #[test]
    fn gather_scatter_roundtrip_gradient() {
        let table = p(&[4, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let picked = table.gather(&[2, 2, 0]).unwrap();
        assert_eq!(picked.values(), vec![5.0, 6.0, 5.0, 6.0, 1.0, 2.0]);
        backward(&picked.sum()).unwrap();
        let g = table.grad().unwrap();
        assert_eq!(g, vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn broadcast_add_reduces_bias_grad() {
        let a = p(&[2, 3], &[0.0; 6]);
        let b = p(&[3], &[1.0, 2.0, 3.0]);
        let out = a.add(&b).unwrap();
        assert_eq!(out.values(), vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        backward(&out.sum()).unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn forward_is_reproducible() {
        let x = t(&[3], &[0.7, -0.3, 2.1]);
        let w = t(&[3, 3], &[0.1, 0.2, 0.3, -0.4, 0.5, -0.6, 0.7, 0.8, 0.9]);
        let a = w.matvec(&x).unwrap().tanh().softmax().unwrap().values();
        let b = w.matvec(&x).unwrap().tanh().softmax().unwrap().values();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
