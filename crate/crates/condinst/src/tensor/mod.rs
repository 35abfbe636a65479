//! Minimal dense tensor library with tape-based reverse-mode differentiation.
//!
//! Tensors are reference-counted handles; ops build a fresh computation
//! graph on every forward pass, which suits networks whose topology changes
//! per image (the per-instance mask heads do exactly that). Training runs in
//! `f32`; the same ops instantiate at `f64` for finite-difference gradient
//! checks, where 32-bit noise would drown the comparison.
//!
//! Forward results are bitwise deterministic for identical inputs: internal
//! parallelism only ever splits work into disjoint output regions, each
//! reduced sequentially in a fixed order.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use num_traits::Float;

use crate::error::{Error, Result};

mod checkpoint;
mod conv;
pub mod gradcheck;
mod resize;
mod sgd;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointEntry, CHECKPOINT_MAGIC};
pub use sgd::Sgd;

/// Element types the tensor library supports: `f32` for training,
/// `f64` for gradient checking.
pub trait Scalar:
    Float
    + std::ops::AddAssign
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Runs `f` with gradient recording disabled (inference fast path).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Context handed to an op's backward closure.
pub(crate) struct BackwardCtx<'a, T: Scalar> {
    /// Forward output of the node being differentiated.
    pub out_data: &'a [T],
    /// Gradient of the loss w.r.t. that output.
    pub out_grad: &'a [T],
}

type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>)>;

struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

/// Dense n-dimensional array participating in a gradient tape.
///
/// Cloning is cheap (handle copy). Maps use NCHW order.
pub struct Tensor<T: Scalar = f32> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.inner.id, self.inner.shape, self.inner.requires_grad
        )
    }
}

impl<T: Scalar> Tensor<T> {
    fn new_leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Constant leaf (no gradient).
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        Self::new_leaf(shape.to_vec(), data, false)
    }

    /// Trainable leaf; `backward()` populates its gradient.
    pub fn param(shape: &[usize], data: Vec<T>) -> Self {
        Self::new_leaf(shape.to_vec(), data, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(shape, vec![T::zero(); shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_vec(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_vec(&[1], vec![value])
    }

    /// Graph node produced by an op. Records parents and a backward closure
    /// only while gradients are enabled and some parent needs them.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let record = grad_enabled() && parents.iter().any(|p| p.inner.requires_grad);
        if !record {
            return Self::new_leaf(shape, data, false);
        }
        assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: true,
                parents,
                backward: Some(backward),
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on shape {:?}", self.shape());
        self.inner.data.borrow()[0]
    }

    /// Overwrites the stored values (optimizer updates, parameter loading).
    pub fn set_data(&self, values: &[T]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), values.len(), "set_data length mismatch");
        d.copy_from_slice(values);
    }

    /// Gradient accumulated by the last backward pass, zero-filled when the
    /// tensor was not reached.
    pub fn grad(&self) -> Vec<T> {
        self.inner
            .grad
            .borrow()
            .clone()
            .unwrap_or_else(|| vec![T::zero(); self.numel()])
    }

    /// Takes and clears the accumulated gradient, if any.
    pub fn take_grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow_mut().take()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Accumulates into this tensor's gradient buffer. No-op for tensors
    /// that do not require gradients.
    pub(crate) fn accum_grad(&self, f: impl FnOnce(&mut [T])) {
        if !self.inner.requires_grad {
            return;
        }
        let mut g = self.inner.grad.borrow_mut();
        let buf = g.get_or_insert_with(|| vec![T::zero(); self.numel()]);
        f(buf);
    }

    /// Reverse-mode accumulation from a scalar loss into every reachable
    /// tensor that requires gradients.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        // Post-order DFS over the requires-grad subgraph; reversed, every
        // consumer runs before the tensors it feeds from.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.inner.id) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in &node.inner.parents {
                if p.inner.requires_grad && !visited.contains(&p.inner.id) {
                    stack.push((p.clone(), false));
                }
            }
        }

        self.accum_grad(|g| g[0] += T::one());
        for node in order.iter().rev() {
            let Some(back) = &node.inner.backward else {
                continue;
            };
            let grad_guard = node.inner.grad.borrow();
            let Some(out_grad) = grad_guard.as_ref() else {
                continue;
            };
            let data_guard = node.inner.data.borrow();
            back(&BackwardCtx {
                out_data: &data_guard,
                out_grad,
            });
        }
        Ok(())
    }
}

fn assert_same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: operand shapes differ: {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

// Elementwise arithmetic and activations.
impl<T: Scalar> Tensor<T> {
    pub fn add(&self, rhs: &Tensor<T>) -> Tensor<T> {
        assert_same_shape("add", self, rhs);
        let data = {
            let (a, b) = (self.data(), rhs.data());
            a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect()
        };
        let (pa, pb) = (self.clone(), rhs.clone());
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |ctx| {
                pa.accum_grad(|g| {
                    for (gi, &go) in g.iter_mut().zip(ctx.out_grad) {
                        *gi += go;
                    }
                });
                pb.accum_grad(|g| {
                    for (gi, &go) in g.iter_mut().zip(ctx.out_grad) {
                        *gi += go;
                    }
                });
            }),
        )
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Tensor<T> {
        assert_same_shape("sub", self, rhs);
        let data = {
            let (a, b) = (self.data(), rhs.data());
            a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect()
        };
        let (pa, pb) = (self.clone(), rhs.clone());
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |ctx| {
                pa.accum_grad(|g| {
                    for (gi, &go) in g.iter_mut().zip(ctx.out_grad) {
                        *gi += go;
                    }
                });
                pb.accum_grad(|g| {
                    for (gi, &go) in g.iter_mut().zip(ctx.out_grad) {
                        *gi = *gi - go;
                    }
                });
            }),
        )
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Tensor<T> {
        assert_same_shape("mul", self, rhs);
        let data = {
            let (a, b) = (self.data(), rhs.data());
            a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect()
        };
        let (pa, pb) = (self.clone(), rhs.clone());
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |ctx| {
                pa.accum_grad(|g| {
                    let b = pb.data();
                    for i in 0..g.len() {
                        g[i] += ctx.out_grad[i] * b[i];
                    }
                });
                pb.accum_grad(|g| {
                    let a = pa.data();
                    for i in 0..g.len() {
                        g[i] += ctx.out_grad[i] * a[i];
                    }
                });
            }),
        )
    }

    pub fn div(&self, rhs: &Tensor<T>) -> Tensor<T> {
        assert_same_shape("div", self, rhs);
        let data = {
            let (a, b) = (self.data(), rhs.data());
            a.iter().zip(b.iter()).map(|(&x, &y)| x / y).collect()
        };
        let (pa, pb) = (self.clone(), rhs.clone());
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |ctx| {
                pa.accum_grad(|g| {
                    let b = pb.data();
                    for i in 0..g.len() {
                        g[i] += ctx.out_grad[i] / b[i];
                    }
                });
                pb.accum_grad(|g| {
                    let (a, b) = (pa.data(), pb.data());
                    for i in 0..g.len() {
                        g[i] = g[i] - ctx.out_grad[i] * a[i] / (b[i] * b[i]);
                    }
                });
            }),
        )
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x + c).collect();
        let p = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                p.accum_grad(|g| {
                    for (gi, &go) in g.iter_mut().zip(ctx.out_grad) {
                        *gi += go;
                    }
                });
            }),
        )
    }

    pub fn mul_scalar(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x * c).collect();
        let p = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                p.accum_grad(|g| {
                    for (gi, &go) in g.iter_mut().zip(ctx.out_grad) {
                        *gi += go * c;
                    }
                });
            }),
        )
    }

    pub fn relu(&self) -> Tensor<T> {
        let data = self
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let p = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                p.accum_grad(|g| {
                    let x = p.data();
                    for i in 0..g.len() {
                        if x[i] > T::zero() {
                            g[i] += ctx.out_grad[i];
                        }
                    }
                });
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| sigmoid_stable(x)).collect();
        let p = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                p.accum_grad(|g| {
                    for i in 0..g.len() {
                        let y = ctx.out_data[i];
                        g[i] += ctx.out_grad[i] * y * (T::one() - y);
                    }
                });
            }),
        )
    }

    pub fn exp(&self) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| x.exp()).collect();
        let p = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                p.accum_grad(|g| {
                    for i in 0..g.len() {
                        g[i] += ctx.out_grad[i] * ctx.out_data[i];
                    }
                });
            }),
        )
    }

    pub fn ln(&self) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| x.ln()).collect();
        let p = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                p.accum_grad(|g| {
                    let x = p.data();
                    for i in 0..g.len() {
                        g[i] += ctx.out_grad[i] / x[i];
                    }
                });
            }),
        )
    }

    /// Sum of all elements, as a `[1]` tensor. Sequential accumulation in
    /// index order keeps the result deterministic.
    pub fn sum(&self) -> Tensor<T> {
        let mut acc = T::zero();
        for &x in self.data().iter() {
            acc += x;
        }
        let p = self.clone();
        Tensor::from_op(
            vec![1],
            vec![acc],
            vec![self.clone()],
            Box::new(move |ctx| {
                let go = ctx.out_grad[0];
                p.accum_grad(|g| {
                    for gi in g.iter_mut() {
                        *gi += go;
                    }
                });
            }),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = T::from_f64(self.numel() as f64);
        self.sum().mul_scalar(T::one() / n)
    }

    /// Sum of several same-shape tensors as one n-ary node (keeps the graph
    /// shallow when reducing hundreds of per-instance losses).
    pub fn add_n(terms: &[Tensor<T>]) -> Tensor<T> {
        assert!(!terms.is_empty(), "add_n on empty list");
        let shape = terms[0].shape().to_vec();
        for t in terms {
            assert_eq!(t.shape(), &shape[..], "add_n: mixed shapes");
        }
        let mut data = vec![T::zero(); terms[0].numel()];
        for t in terms {
            let d = t.data();
            for i in 0..data.len() {
                data[i] += d[i];
            }
        }
        let parents: Vec<Tensor<T>> = terms.to_vec();
        let handles = parents.clone();
        Tensor::from_op(
            shape,
            data,
            parents,
            Box::new(move |ctx| {
                for h in &handles {
                    h.accum_grad(|g| {
                        for (gi, &go) in g.iter_mut().zip(ctx.out_grad) {
                            *gi += go;
                        }
                    });
                }
            }),
        )
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        assert_eq!(
            self.numel(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {:?}",
            self.shape(),
            shape
        );
        let data = self.to_vec();
        let p = self.clone();
        Tensor::from_op(
            shape.to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                p.accum_grad(|g| {
                    for (gi, &go) in g.iter_mut().zip(ctx.out_grad) {
                        *gi += go;
                    }
                });
            }),
        )
    }

    /// Slice `[index]` along the leading dimension, keeping it with extent 1.
    pub fn index0(&self, index: usize) -> Tensor<T> {
        let shape = self.shape();
        assert!(!shape.is_empty() && index < shape[0], "index0 out of range");
        let chunk = self.numel() / shape[0];
        let data = self.data()[index * chunk..(index + 1) * chunk].to_vec();
        let mut out_shape = shape.to_vec();
        out_shape[0] = 1;
        let p = self.clone();
        Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                p.accum_grad(|g| {
                    let dst = &mut g[index * chunk..(index + 1) * chunk];
                    for (gi, &go) in dst.iter_mut().zip(ctx.out_grad) {
                        *gi += go;
                    }
                });
            }),
        )
    }

    /// Gathers the channel vector at each `(n, y, x)` of an NCHW map,
    /// producing `[K, C]`. Gradients scatter back to the source locations.
    pub fn gather_spatial(&self, locations: &[(usize, usize, usize)]) -> Tensor<T> {
        let shape = self.shape();
        assert_eq!(shape.len(), 4, "gather_spatial expects NCHW");
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let k = locations.len();
        let mut data = vec![T::zero(); k * c];
        {
            let src = self.data();
            for (ki, &(ni, yi, xi)) in locations.iter().enumerate() {
                assert!(ni < n && yi < h && xi < w, "gather_spatial out of range");
                for ci in 0..c {
                    data[ki * c + ci] = src[((ni * c + ci) * h + yi) * w + xi];
                }
            }
        }
        let locs = locations.to_vec();
        let p = self.clone();
        Tensor::from_op(
            vec![k, c],
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                p.accum_grad(|g| {
                    for (ki, &(ni, yi, xi)) in locs.iter().enumerate() {
                        for ci in 0..c {
                            g[((ni * c + ci) * h + yi) * w + xi] += ctx.out_grad[ki * c + ci];
                        }
                    }
                });
            }),
        )
    }
}

pub(crate) fn sigmoid_stable<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    let m = if x > T::zero() { x } else { T::zero() };
    m + ((-x.abs()).exp() + T::one()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_shape_and_data() {
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.numel(), 6);
        assert!(!t.requires_grad());
    }

    #[test]
    #[should_panic(expected = "data length")]
    fn leaf_length_checked() {
        let _ = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]);
    }

    #[test]
    fn relu_gradient_positive_side() {
        let x = Tensor::<f64>::param(&[1], vec![2.0]);
        let loss = x.relu();
        loss.backward().unwrap();
        assert_eq!(x.grad(), vec![1.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let x = Tensor::<f64>::param(&[1], vec![0.0]);
        let loss = x.sigmoid();
        loss.backward().unwrap();
        assert!((x.grad()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::<f64>::param(&[2], vec![1.0, 2.0]);
        let y = x.relu();
        assert!(matches!(y.backward(), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn grad_zero_filled_when_unreached() {
        let x = Tensor::<f64>::param(&[2], vec![1.0, 2.0]);
        let y = Tensor::<f64>::param(&[1], vec![3.0]);
        let loss = y.mul_scalar(2.0);
        loss.backward().unwrap();
        assert_eq!(x.grad(), vec![0.0, 0.0]);
        assert_eq!(y.grad(), vec![2.0]);
    }

    #[test]
    fn shared_operand_accumulates() {
        // d(x*x)/dx = 2x
        let x = Tensor::<f64>::param(&[1], vec![3.0]);
        let loss = x.mul(&x);
        loss.backward().unwrap();
        assert_eq!(x.grad(), vec![6.0]);
    }

    #[test]
    fn no_grad_skips_recording() {
        let x = Tensor::<f64>::param(&[1], vec![1.0]);
        let y = no_grad(|| x.mul_scalar(5.0));
        assert!(!y.requires_grad());
        assert_eq!(y.item(), 5.0);
    }

    #[test]
    fn add_n_matches_chain() {
        let xs: Vec<Tensor<f64>> = (0..5).map(|i| Tensor::param(&[1], vec![i as f64])).collect();
        let total = Tensor::add_n(&xs);
        assert_eq!(total.item(), 10.0);
        total.backward().unwrap();
        for x in &xs {
            assert_eq!(x.grad(), vec![1.0]);
        }
    }

    #[test]
    fn gather_spatial_roundtrip() {
        // 1x2x2x2 map, pick (0,1,0)
        let t = Tensor::<f64>::param(&[1, 2, 2, 2], (0..8).map(f64::from).collect());
        let g = t.gather_spatial(&[(0, 1, 0)]);
        assert_eq!(g.shape(), &[1, 2]);
        assert_eq!(g.to_vec(), vec![2.0, 6.0]);
        let loss = g.sum();
        loss.backward().unwrap();
        let grad = t.grad();
        assert_eq!(grad.iter().filter(|&&v| v != 0.0).count(), 2);
        assert_eq!(grad[2], 1.0);
        assert_eq!(grad[6], 1.0);
    }
}
