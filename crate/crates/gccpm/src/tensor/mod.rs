//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable once created; the only interior mutability is the
//! gradient buffer, which `backward` populates and `zero_grad` clears. Every
//! operation that participates in differentiation records its parents and a
//! backward closure, forming a DAG that `backward` walks in reverse creation
//! order. Graph recording can be suspended with [`no_grad`] for inference.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::scalar::Scalar;

mod adam;
mod conv;
mod elem;
mod gradcheck;
mod pool;
mod resize;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use conv::{conv2d, conv_output_extent, ConvSpec};
pub use elem::{add, concat, mul, relu, scale, sub, sum_all};
pub use gradcheck::finite_diff_check;
pub use pool::{pool2d, PoolKind};
pub use resize::{resize_bilinear, upsample, UpsampleMode};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape extents must be positive, got {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("{context}: shapes {left:?} and {right:?} are incompatible")]
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{context}: expected rank-{expected} tensor, got shape {shape:?}")]
    RankMismatch {
        context: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{context}: {message}")]
    InvalidSpec {
        context: &'static str,
        message: String,
    },
    #[error("{context}: output extent would be non-positive (input {input}, computed {computed})")]
    EmptyOutput {
        context: &'static str,
        input: usize,
        computed: i64,
    },
    #[error("concat needs at least one tensor")]
    EmptyConcat,
}

pub type TensorResult<T> = Result<T, TensorError>;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static PARALLEL_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with autodiff graph recording disabled on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with internal data-parallel loops forced onto this thread, for
/// timing stability. Results are bit-identical either way.
pub fn run_sequential<R>(f: impl FnOnce() -> R) -> R {
    let prev = PARALLEL_ENABLED.with(|g| g.replace(false));
    let out = f();
    PARALLEL_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn parallel_enabled() -> bool {
    PARALLEL_ENABLED.with(|g| g.get())
}

/// Disjoint-chunk loop that parallelizes across chunks when permitted; each
/// chunk is processed sequentially, so results do not depend on scheduling.
pub(crate) fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    use rayon::prelude::*;
    if parallel_enabled() {
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        for (i, c) in data.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    }
}

/// Backward closure: receives the parents and the output gradient, returns one
/// optional gradient per parent slot (None for non-differentiable slots).
type BackwardFn<T> = Box<dyn Fn(&[Tensor<T>], &[T]) -> Vec<Option<Vec<T>>>>;

struct TensorInner<T: Scalar> {
    id: usize,
    shape: Vec<usize>,
    data: Vec<T>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    needs_grad: bool,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

/// Dense N-dimensional array (N×C×H×W layout for feature maps) with an
/// optional gradient buffer. Cloning is cheap and shares storage.
pub struct Tensor<T: Scalar> {
    inner: Rc<TensorInner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            self.shape(),
            self.requires_grad()
        )
    }
}

impl<T: Scalar> Tensor<T> {
    fn new_inner(
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        parents: Vec<Tensor<T>>,
        backward: Option<BackwardFn<T>>,
    ) -> Self {
        let needs_grad = requires_grad || parents.iter().any(|p| p.inner.needs_grad);
        Tensor {
            inner: Rc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                grad: RefCell::new(None),
                requires_grad,
                needs_grad,
                parents,
                backward,
            }),
        }
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> TensorResult<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ZeroExtent(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                expected,
                got: data.len(),
                shape,
            });
        }
        Ok(Self::new_inner(shape, data, false, Vec::new(), None))
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![T::zero(); n]).expect("zeros: shape/data consistent")
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![value; n]).expect("full: shape/data consistent")
    }

    pub fn scalar(value: T) -> Self {
        Self::from_vec(vec![1], vec![value]).expect("scalar")
    }

    /// Leaf tensor that accumulates gradients (a trainable parameter).
    pub fn param(shape: Vec<usize>, data: Vec<T>) -> TensorResult<Self> {
        let t = Self::from_vec(shape, data)?;
        Ok(Self::new_inner(
            t.inner.shape.clone(),
            t.inner.data.clone(),
            true,
            Vec::new(),
            None,
        ))
    }

    /// Internal constructor for op results.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.inner.needs_grad);
        if track {
            Self::new_inner(shape, data, false, parents, Some(backward))
        } else {
            Self::new_inner(shape, data, false, Vec::new(), None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// True if every element is finite (no NaN/Inf error state).
    pub fn is_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    fn accumulate_grad(&self, incoming: &[T]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => {
                for (e, &i) in existing.iter_mut().zip(incoming) {
                    *e = *e + i;
                }
            }
            None => *slot = Some(incoming.to_vec()),
        }
    }

    /// Reverse-mode differentiation from a scalar loss. Populates the `grad`
    /// buffer of every `requires_grad` tensor reachable through recorded
    /// operations; repeated calls accumulate until `zero_grad`.
    pub fn backward(&self) -> TensorResult<()> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.inner.shape.clone()));
        }
        // Collect the reachable subgraph. Ids increase monotonically with
        // creation order, so descending id order is a valid reverse
        // topological order.
        let mut nodes: HashMap<usize, Tensor<T>> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if nodes.contains_key(&t.inner.id) {
                continue;
            }
            for p in &t.inner.parents {
                if p.inner.needs_grad {
                    stack.push(p.clone());
                }
            }
            nodes.insert(t.inner.id, t);
        }
        let mut order: Vec<usize> = nodes.keys().copied().collect();
        order.sort_unstable_by(|a, b| b.cmp(a));

        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(self.inner.id, vec![T::one()]);

        for id in order {
            let Some(g) = grads.remove(&id) else { continue };
            let node = &nodes[&id];
            if node.inner.requires_grad {
                node.accumulate_grad(&g);
            }
            if let Some(backward) = &node.inner.backward {
                let parent_grads = backward(&node.inner.parents, &g);
                debug_assert_eq!(parent_grads.len(), node.inner.parents.len());
                for (parent, pg) in node.inner.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !parent.inner.needs_grad {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), parent.numel());
                    match grads.get_mut(&parent.inner.id) {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(&pg) {
                                *a = *a + *v;
                            }
                        }
                        None => {
                            grads.insert(parent.inner.id, pg);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Strides for a contiguous row-major layout.
pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_length() {
        let err = Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { expected: 6, .. }));
        assert!(Tensor::<f32>::from_vec(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let t = Tensor::<f64>::zeros(vec![2, 2]);
        assert!(matches!(t.backward(), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn sum_of_product_grad_is_input() {
        // loss = sum(w * x) with x fixed => grad(w) = x
        let w = Tensor::<f64>::param(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let x = Tensor::from_vec(vec![3], vec![4.0, 5.0, 6.0]).unwrap();
        let loss = sum_all(&mul(&w, &x).unwrap());
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![4.0, 5.0, 6.0]);
    }

    #[test]
    fn sum_of_square_grad_is_two_w() {
        let w = Tensor::<f64>::param(vec![2], vec![3.0, -2.0]).unwrap();
        let loss = sum_all(&mul(&w, &w).unwrap());
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![6.0, -4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let w = Tensor::<f64>::param(vec![1], vec![2.0]).unwrap();
        let loss = sum_all(&mul(&w, &w).unwrap());
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![8.0]);
        w.zero_grad();
        assert!(w.grad().is_none());
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let w = Tensor::<f64>::param(vec![1], vec![2.0]).unwrap();
        let loss = no_grad(|| sum_all(&mul(&w, &w).unwrap()));
        loss.backward().unwrap();
        assert!(w.grad().is_none());
    }
}
