use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::kernels::numel;
use crate::ops::Op;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Whether operations on this thread currently record a graph.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Restores the previous grad mode when dropped.
pub struct GradModeGuard {
    prev: bool,
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn set_grad_enabled(enabled: bool) -> GradModeGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
    GradModeGuard { prev }
}

/// Runs `f` without recording any graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = set_grad_enabled(false);
    f()
}

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Vec<f64>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Option<Op>,
}

impl Drop for Node {
    // Long chains would otherwise recurse once per node on drop.
    fn drop(&mut self) {
        let mut stack: Vec<Tensor> = match self.op.take() {
            Some(op) => op.into_inputs(),
            None => return,
        };
        while let Some(t) = stack.pop() {
            if let Ok(mut node) = Arc::try_unwrap(t.0) {
                if let Some(op) = node.op.take() {
                    stack.extend(op.into_inputs());
                }
            }
        }
    }
}

/// An immutable, reference-counted n-d array of `f64` that remembers how it
/// was computed.
#[derive(Clone)]
pub struct Tensor(pub(crate) Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.0.op.as_ref().map(Op::name).unwrap_or("leaf");
        write!(f, "Tensor(shape={:?}, op={op}, requires_grad={})", self.0.shape, self.0.requires_grad)
    }
}

impl Tensor {
    pub(crate) fn build(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Option<Op>) -> Self {
        assert_eq!(data.len(), numel(&shape), "data length does not match shape {shape:?}");
        Tensor(Arc::new(Node {
            id: fresh_id(),
            shape,
            data: Arc::new(data),
            requires_grad,
            op,
        }))
    }

    /// Result of an operation: records `op` only if grad mode is on and some
    /// input requires a gradient.
    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Self {
        if is_grad_enabled() && op.any_requires_grad() {
            Self::build(data, shape, true, Some(op))
        } else {
            Self::build(data, shape, false, None)
        }
    }

    /// A constant (never differentiated) tensor.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Self {
        Self::build(data, shape.to_vec(), false, None)
    }

    /// A leaf tensor that gradients can be taken with respect to.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Self {
        Self::build(data, shape.to_vec(), true, None)
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(vec![v], &[])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::from_vec(vec![v; numel(shape)], shape)
    }

    /// Same values, no history, no gradient.
    pub fn detach(&self) -> Self {
        Tensor(Arc::new(Node {
            id: fresh_id(),
            shape: self.0.shape.clone(),
            data: Arc::clone(&self.0.data),
            requires_grad: false,
            op: None,
        }))
    }

    /// Same values as a fresh leaf that requires a gradient.
    pub fn detach_param(&self) -> Self {
        Tensor(Arc::new(Node {
            id: fresh_id(),
            shape: self.0.shape.clone(),
            data: Arc::clone(&self.0.data),
            requires_grad: true,
            op: None,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.as_ref().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// True when both handles refer to the same node.
    pub fn same_as(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.id
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.0.data)
    }
}
