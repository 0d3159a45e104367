//! Dense-tensor numerics with reverse-mode automatic differentiation.
//!
//! A `Tensor` is a shared handle onto reference-counted storage. Every
//! operation whose inputs are connected to the gradient graph records itself
//! on its result, so a later `backward` can replay the chain in reverse
//! topological order. Operations over plain constant tensors (for example a
//! frozen teacher forward) record nothing and build no graph.

pub mod layers;
mod ops;

pub use ops::{bce_with_logits, cross_entropy, mse};

use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use ops::Op;

pub struct Tensor<S: Scalar> {
    inner: Rc<RefCell<TensorData<S>>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &d.shape)
            .field("requires_grad", &d.requires_grad)
            .finish()
    }
}

pub(crate) struct TensorData<S: Scalar> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<S>,
    pub(crate) grad: Option<Vec<S>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Constant leaf tensor. Fails when the shape does not account for every
    /// data element.
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor construction",
                format!("shape {:?} holds {} elements, got {}", shape, expected, data.len()),
            ));
        }
        Ok(Self::from_parts(shape.to_vec(), data, false, Op::Leaf))
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn parameter(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn scalar(v: S) -> Self {
        Self::from_parts(vec![], vec![v], false, Op::Leaf)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, S::zero())
    }

    pub fn filled(shape: &[usize], v: S) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![v; n], false, Op::Leaf)
    }

    fn from_parts(shape: Vec<usize>, data: Vec<S>, requires_grad: bool, op: Op<S>) -> Self {
        Tensor {
            inner: Rc::new(RefCell::new(TensorData {
                shape,
                data,
                grad: None,
                requires_grad,
                op,
            })),
        }
    }

    /// Result of an operation: the op is recorded only when some input is
    /// graph-connected, so constant subgraphs stay tape-free.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<S>, op: Op<S>) -> Self {
        let connected = op.parents().iter().any(|p| p.is_graph_connected());
        let op = if connected { op } else { Op::Leaf };
        Self::from_parts(shape, data, false, op)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn value(&self) -> Vec<S> {
        self.inner.borrow().data.clone()
    }

    /// Sole element of a scalar tensor.
    pub fn item(&self) -> S {
        let d = self.inner.borrow();
        assert_eq!(d.data.len(), 1, "item() requires a single-element tensor");
        d.data[0]
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.borrow().grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, on: bool) {
        self.inner.borrow_mut().requires_grad = on;
    }

    pub fn clear_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Replace the stored values, keeping shape and graph membership.
    pub fn set_data(&self, data: Vec<S>) -> Result<()> {
        let mut d = self.inner.borrow_mut();
        if data.len() != d.data.len() {
            return Err(Error::shape(
                "set_data",
                format!("tensor holds {} elements, got {}", d.data.len(), data.len()),
            ));
        }
        d.data = data;
        Ok(())
    }

    pub fn map_data_in_place(&self, f: impl Fn(S) -> S) {
        let mut d = self.inner.borrow_mut();
        for v in d.data.iter_mut() {
            *v = f(*v);
        }
    }

    /// One step of gradient descent: data -= lr * grad. No-op without a grad.
    pub fn gradient_step(&self, lr: S) {
        let mut d = self.inner.borrow_mut();
        let Some(grad) = d.grad.take() else { return };
        for (v, g) in d.data.iter_mut().zip(&grad) {
            *v = *v - lr * *g;
        }
        d.grad = Some(grad);
    }

    /// Each element rounded to the nearest IEEE-754 binary16 value (ties to
    /// even, overflow saturating at ±65504), stored back at working
    /// precision. The result is a fresh constant leaf.
    pub fn to_half_precision(&self) -> Tensor<S> {
        let d = self.inner.borrow();
        let data = d.data.iter().map(|v| v.quantize_binary16()).collect();
        Self::from_parts(d.shape.clone(), data, false, Op::Leaf)
    }

    pub(crate) fn is_graph_connected(&self) -> bool {
        let d = self.inner.borrow();
        d.requires_grad || !matches!(d.op, Op::Leaf)
    }

    pub(crate) fn ptr(&self) -> *const () {
        Rc::as_ptr(&self.inner) as *const ()
    }

    pub(crate) fn borrow(&self) -> Ref<'_, TensorData<S>> {
        self.inner.borrow()
    }

    /// Reverse-mode gradient propagation from a scalar loss. Gradients
    /// accumulate into `grad` buffers across calls; use `zero_gradients`
    /// or `clear_grad` between independent passes.
    pub fn backward(&self) -> Result<()> {
        {
            let d = self.inner.borrow();
            if d.data.len() != 1 {
                return Err(Error::NonScalarLoss(d.shape.clone()));
            }
        }
        let order = topo_order(std::slice::from_ref(self));
        // Per-pass gradients live in a scratch map so that an earlier
        // backward's accumulated grads are never propagated twice.
        let mut scratch: HashMap<*const (), Vec<S>> = HashMap::new();
        scratch.insert(self.ptr(), vec![S::one()]);
        for node in order.iter().rev() {
            let Some(g) = scratch.remove(&node.ptr()) else {
                continue;
            };
            {
                let d = node.inner.borrow();
                ops::backward_op(&d.op, &d.shape, &g, &mut scratch);
            }
            let mut d = node.inner.borrow_mut();
            match &mut d.grad {
                Some(existing) => {
                    for (e, gi) in existing.iter_mut().zip(&g) {
                        *e += *gi;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Clear gradients on every tensor reachable from `roots` through the
    /// recorded graph (parameters included).
    pub fn zero_gradients(roots: &[Tensor<S>]) {
        for node in topo_order(roots) {
            node.inner.borrow_mut().grad = None;
        }
    }
}

/// Postorder over the recorded graph; reversing it yields a valid
/// consumers-before-producers order for backward.
fn topo_order<S: Scalar>(roots: &[Tensor<S>]) -> Vec<Tensor<S>> {
    let mut order = Vec::new();
    let mut visited: HashSet<*const ()> = HashSet::new();
    let mut stack: Vec<(Tensor<S>, bool)> = Vec::new();
    for r in roots {
        stack.push((r.clone(), false));
    }
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.ptr()) {
            continue;
        }
        stack.push((node.clone(), true));
        for p in node.inner.borrow().op.parents() {
            if p.is_graph_connected() && !visited.contains(&p.ptr()) {
                stack.push((p, false));
            }
        }
    }
    order
}
