//! Dense N-dimensional tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheaply clonable handle to an immutable value plus an
//! optional record of the operation that produced it. Calling
//! [`Tensor::backward`] on a scalar walks the recorded graph in reverse
//! topological order and accumulates gradients into every reachable leaf
//! that was created with `requires_grad`.
//!
//! Data is immutable after creation; only the gradient slot of a leaf is
//! written during a backward sweep. Graphs are single-threaded (`Rc`-based);
//! parameter *values* live outside the graph and can be shared freely.

mod conv;
mod ops;
mod scalar;

pub use conv::ConvSpec;
pub use ops::PadMode;
pub use scalar::Scalar;

use ops::Op;
use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static PEAK_NUMEL: Cell<usize> = const { Cell::new(0) };
}

/// Largest single tensor (in elements) allocated on this thread since the
/// last [`reset_peak_numel`]. Used by structural tests that assert an
/// algorithm never materializes a quadratic-size intermediate.
pub fn peak_numel() -> usize {
    PEAK_NUMEL.with(|p| p.get())
}

pub fn reset_peak_numel() {
    PEAK_NUMEL.with(|p| p.set(0));
}

pub(crate) struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Rc<Vec<T>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    op: Option<Op<T>>,
}

/// Handle to an immutable tensor value; clones share the same node.
pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

pub(crate) fn make_shared<T: Scalar>(
    data: Rc<Vec<T>>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Option<Op<T>>,
) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    assert_eq!(
        data.len(),
        numel,
        "tensor data length {} does not match shape {:?}",
        data.len(),
        shape
    );
    PEAK_NUMEL.with(|p| {
        if numel > p.get() {
            p.set(numel);
        }
    });
    Tensor {
        inner: Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            op,
        }),
    }
}

impl<T: Scalar> Tensor<T> {
    fn make(data: Vec<T>, shape: Vec<usize>, requires_grad: bool, op: Option<Op<T>>) -> Self {
        make_shared(Rc::new(data), shape, requires_grad, op)
    }

    /// A constant leaf (no gradient tracking).
    pub fn new(data: Vec<T>, shape: &[usize]) -> Self {
        Self::make(data, shape.to_vec(), false, None)
    }

    /// A leaf that accumulates gradients during backward sweeps.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Self {
        Self::make(data, shape.to_vec(), true, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::new(vec![T::ZERO; numel], shape)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::new(vec![value; numel], shape)
    }

    pub fn scalar(value: T) -> Self {
        Self::new(vec![value], &[1])
    }

    pub(crate) fn from_op(data: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Self {
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        if requires_grad {
            Self::make(data, shape, true, Some(op))
        } else {
            // Nothing upstream wants gradients: drop the graph record so
            // inference-only evaluation frees intermediates as it goes.
            Self::make(data, shape, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<T>> {
        Rc::clone(&self.inner.data)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    /// Gradient accumulated so far in this leaf, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Same value, detached from the graph and without gradient tracking.
    pub fn detach(&self) -> Tensor<T> {
        Self::make(self.data().to_vec(), self.shape().to_vec(), false, None)
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor::new(self.data().iter().map(|v| v.to_f64()).collect(), self.shape())
    }

    /// Reverse sweep from a scalar: every reachable `requires_grad` leaf gets
    /// `d(self)/d(leaf)` added into its gradient slot. Fan-out accumulates
    /// additively.
    pub fn backward(&self) {
        assert_eq!(
            self.numel(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            self.shape()
        );
        if !self.requires_grad() {
            return;
        }

        // Node ids are creation-ordered and an op can only reference tensors
        // that already exist, so descending id is a valid topological order.
        let mut nodes: Vec<Tensor<T>> = Vec::new();
        let mut seen: std::collections::HashSet<u64> = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(node) = stack.pop() {
            if !seen.insert(node.id()) {
                continue;
            }
            if let Some(op) = &node.inner.op {
                for parent in op.parents() {
                    if parent.requires_grad() {
                        stack.push(parent);
                    }
                }
            }
            nodes.push(node);
        }
        nodes.sort_by(|a, b| b.id().cmp(&a.id()));

        let mut grads: GradMap<T> = GradMap { buffers: HashMap::new() };
        grads.buffers.insert(self.id(), vec![T::ONE]);

        for node in &nodes {
            let Some(grad) = grads.buffers.remove(&node.id()) else {
                continue;
            };
            match &node.inner.op {
                Some(op) => op.backward(node, &grad, &mut grads),
                None => {
                    let mut slot = node.inner.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => {
                            for (a, g) in acc.iter_mut().zip(grad.iter()) {
                                *a += *g;
                            }
                        }
                        None => *slot = Some(grad),
                    }
                }
            }
        }
    }
}

/// Per-sweep gradient buffers keyed by node id.
pub(crate) struct GradMap<T: Scalar> {
    buffers: HashMap<u64, Vec<T>>,
}

impl<T: Scalar> GradMap<T> {
    /// Add `grad` into the buffer of `parent` (ignored when the parent does
    /// not participate in differentiation).
    pub(crate) fn contribute(&mut self, parent: &Tensor<T>, grad: Vec<T>) {
        if !parent.requires_grad() {
            return;
        }
        debug_assert_eq!(grad.len(), parent.numel());
        match self.buffers.get_mut(&parent.id()) {
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(grad.iter()) {
                    *a += *g;
                }
            }
            None => {
                self.buffers.insert(parent.id(), grad);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_roundtrip() {
        let t = Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.numel(), 6);
        assert!(!t.requires_grad());
    }

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn shape_mismatch_panics() {
        let _ = Tensor::new(vec![1.0_f64; 5], &[2, 3]);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let x = Tensor::param(vec![1.0, -2.0, 3.0], &[3]);
        let loss = x.sum_all();
        loss.backward();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let x = Tensor::param(vec![1.0, 2.0, 3.0], &[3]);
        let loss = x.mul(&x).sum_all();
        loss.backward();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn fanout_accumulates() {
        // d(sum(x + x))/dx == 2 everywhere.
        let x = Tensor::param(vec![0.5, -1.5, 2.0, 7.0], &[4]);
        let loss = x.add(&x).sum_all();
        loss.backward();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    #[should_panic(expected = "backward requires a scalar loss")]
    fn backward_non_scalar_panics() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]);
        x.add(&x).backward();
    }

    #[test]
    fn peak_numel_tracks_allocations() {
        reset_peak_numel();
        let _a = Tensor::<f64>::zeros(&[3, 4]);
        let _b = Tensor::<f64>::zeros(&[2]);
        assert_eq!(peak_numel(), 12);
    }
}
