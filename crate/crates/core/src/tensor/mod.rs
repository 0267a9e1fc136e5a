//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Every differentiable op records its inputs and a closure mapping the
//! output gradient to input gradients. [`Tensor::backward`] walks that record
//! in reverse topological order and accumulates into the `grad` buffers of
//! leaves created with `requires_grad`.
//!
//! Tensor values are immutable once built; only leaf gradient buffers change.

mod float;
pub(crate) mod gemm;
mod ops;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

pub use float::Float;
pub use ops::{concat, conv2d_patchify, cross_entropy, layer_norm};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Row-major extents. Rank 0 denotes a scalar.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.contains(&0) {
            return Err(Error::shape("shape", format!("zero extent in {dims:?}")));
        }
        Ok(Shape(dims))
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn last(&self) -> usize {
        self.0.last().copied().unwrap_or(1)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// What a backward closure sees for one recorded op.
pub(crate) struct BackwardCtx<'a, T: Float> {
    pub inputs: &'a [Tensor<T>],
    pub output: &'a [T],
    pub grad: &'a [T],
}

/// One gradient per input; `None` where the input takes no gradient.
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Lineage<T: Float> {
    op: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Float> {
    id: u64,
    shape: Shape,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    lineage: Option<Lineage<T>>,
}

/// A dense tensor handle. Cloning is cheap and shares storage.
pub struct Tensor<T: Float = f32> {
    inner: Arc<Inner<T>>,
}

impl<T: Float> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.inner.lineage.as_ref().map_or("leaf", |l| l.op);
        write!(
            f,
            "Tensor<{}>(shape={}, op={}, requires_grad={})",
            T::NAME,
            self.inner.shape,
            op,
            self.inner.requires_grad
        )
    }
}

impl<T: Float> Tensor<T> {
    fn build(
        shape: Shape,
        data: Vec<T>,
        requires_grad: bool,
        lineage: Option<Lineage<T>>,
    ) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                lineage,
            }),
        }
    }

    /// A leaf tensor that does not take gradients.
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        Self::leaf(dims, data, false)
    }

    /// A leaf tensor; with `requires_grad` it receives gradients on backward.
    pub fn leaf(dims: impl Into<Vec<usize>>, data: Vec<T>, requires_grad: bool) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape} needs {} values, got {}", shape.numel(), data.len()),
            ));
        }
        Ok(Self::build(shape, data, requires_grad, None))
    }

    pub fn scalar(v: T) -> Self {
        Self::build(Shape::scalar(), vec![v], false, None)
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: impl Into<Vec<usize>>, v: T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Ok(Self::build(shape, vec![v; n], false, None))
    }

    /// Result of a differentiable op. Lineage is kept only when some input
    /// takes gradients.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Shape,
        data: Vec<T>,
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let requires_grad = inputs.iter().any(Tensor::requires_grad);
        let lineage = requires_grad.then(|| Lineage {
            op,
            inputs,
            backward,
        });
        Self::build(shape, data, requires_grad, lineage)
    }

    pub fn shape(&self) -> &Shape {
        &self.inner.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.inner.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.rank()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.inner.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::shape(
                "item",
                format!("expected one element, shape is {}", self.shape()),
            )),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.lineage.is_none()
    }

    /// Name of the producing op, `None` for leaves.
    pub fn op_name(&self) -> Option<&'static str> {
        self.inner.lineage.as_ref().map(|l| l.op)
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock") = None;
    }

    /// Same values as a fresh leaf with no history.
    pub fn detach(&self) -> Self {
        Self::build(self.shape().clone(), self.to_vec(), false, None)
    }

    /// Fresh leaf with the same values and the given gradient flag.
    pub fn to_leaf(&self, requires_grad: bool) -> Self {
        Self::build(self.shape().clone(), self.to_vec(), requires_grad, None)
    }

    /// Element-type conversion; the result is a leaf.
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|v| U::of(v.as_f64())).collect();
        Tensor::build(self.shape().clone(), data, false, None)
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    /// Accumulates `dloss/dleaf` into every reachable leaf that takes
    /// gradients. Repeated calls add to existing gradients.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Backward(
                "loss does not depend on any tensor that requires grad".into(),
            ));
        }
        let fault = fault::current();
        let order = self.topo_order();
        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);

        for node in order.iter().rev() {
            let Some(grad) = grads.remove(&node.id()) else {
                continue;
            };
            let Some(lineage) = &node.inner.lineage else {
                let mut slot = node.inner.grad.lock().expect("grad lock");
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a = *a + *g),
                    None => *slot = Some(grad),
                }
                continue;
            };
            let ctx = BackwardCtx {
                inputs: &lineage.inputs,
                output: node.data(),
                grad: &grad,
            };
            let mut input_grads = (lineage.backward)(&ctx);
            debug_assert_eq!(input_grads.len(), lineage.inputs.len());
            if fault.as_deref() == Some(lineage.op) {
                fault::corrupt(&mut input_grads);
            }
            for (input, g) in lineage.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !input.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.len(), input.numel(), "grad size for {}", lineage.op);
                match grads.get_mut(&input.id()) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                    None => {
                        grads.insert(input.id(), g);
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the nodes that take gradients, inputs first.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(lineage) = &node.inner.lineage {
                for input in lineage.inputs.iter().rev() {
                    if input.requires_grad() && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// Backward fault injection, used to prove the gradient checker catches a
/// broken derivative.
pub mod fault {
    use super::*;

    static FAULT: RwLock<Option<String>> = RwLock::new(None);

    /// Corrupt the backward pass of every op named `op` until cleared.
    pub fn inject(op: &str) {
        *FAULT.write().expect("fault lock") = Some(op.to_string());
    }

    pub fn clear() {
        *FAULT.write().expect("fault lock") = None;
    }

    pub(super) fn current() -> Option<String> {
        FAULT.read().expect("fault lock").clone()
    }

    pub(super) fn corrupt<T: Float>(grads: &mut [Option<Vec<T>>]) {
        for g in grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v = *v * T::of(1.01) + T::of(1e-3);
            }
        }
    }
}

#[cfg(test)]
mod tests;
