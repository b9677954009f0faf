//! Tape-based reverse-mode differentiation over coarse tensor operations.
//!
//! A [`Graph`] records every operation whose inputs include a tracked
//! [`Var`]. Each recorded node keeps a one-shot adjoint closure; calling
//! [`Graph::backward`] replays them in reverse order and returns the
//! accumulated [`Gradients`] of all tracked leaves.
//!
//! A graph built with [`Graph::no_grad`] records nothing, so intermediate
//! values are released as soon as the last `Var` referencing them drops.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Adjoint of one node: given the output gradient and a per-input "needs
/// gradient" mask, returns one optional gradient per input.
pub(crate) type Adjoint<R> = Box<dyn FnOnce(&Tensor<R>, &[bool]) -> Vec<Option<Tensor<R>>>>;

struct Node<R> {
    parents: Vec<Option<usize>>,
    adjoint: Option<Adjoint<R>>,
}

pub struct Graph<R> {
    nodes: RefCell<Vec<Node<R>>>,
    recording: bool,
    consumed: Cell<bool>,
}

/// A value flowing through a [`Graph`]. Cloning is cheap.
#[derive(Clone, Debug)]
pub struct Var<R> {
    value: Arc<Tensor<R>>,
    id: Option<usize>,
}

impl<R: Real> Var<R> {
    pub fn value(&self) -> &Tensor<R> {
        &self.value
    }

    pub fn value_arc(&self) -> &Arc<Tensor<R>> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    /// Unwraps the value, cloning only if it is still shared.
    pub fn into_tensor(self) -> Tensor<R> {
        Arc::try_unwrap(self.value).unwrap_or_else(|shared| (*shared).clone())
    }
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    /// A recording graph.
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), recording: true, consumed: Cell::new(false) }
    }

    /// A graph that never records; every `Var` it produces is untracked.
    pub fn no_grad() -> Self {
        Self { nodes: RefCell::new(Vec::new()), recording: false, consumed: Cell::new(false) }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// An untracked input.
    pub fn constant(&self, t: Tensor<R>) -> Var<R> {
        Var { value: Arc::new(t), id: None }
    }

    pub fn constant_arc(&self, t: Arc<Tensor<R>>) -> Var<R> {
        Var { value: t, id: None }
    }

    /// A tracked leaf whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&self, t: Tensor<R>) -> Var<R> {
        self.leaf_arc(Arc::new(t))
    }

    pub fn leaf_arc(&self, t: Arc<Tensor<R>>) -> Var<R> {
        if !self.recording {
            return Var { value: t, id: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents: Vec::new(), adjoint: None });
        Var { value: t, id: Some(nodes.len() - 1) }
    }

    /// Records `value` as the result of an operation over `inputs`. The
    /// adjoint is kept only when recording and at least one input is tracked.
    pub(crate) fn record<F>(&self, value: Tensor<R>, inputs: &[&Var<R>], adjoint: F) -> Var<R>
    where
        F: FnOnce(&Tensor<R>, &[bool]) -> Vec<Option<Tensor<R>>> + 'static,
    {
        let value = Arc::new(value);
        if !self.recording || inputs.iter().all(|v| v.id.is_none()) {
            return Var { value, id: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents: inputs.iter().map(|v| v.id).collect(), adjoint: Some(Box::new(adjoint)) });
        Var { value, id: Some(nodes.len() - 1) }
    }

    /// Propagates d(loss)/d(node) from a scalar `loss` back to every tracked
    /// leaf. The graph can be differentiated only once.
    pub fn backward(&self, loss: &Var<R>) -> Result<Gradients<R>> {
        if loss.value.numel() != 1 {
            return Err(Error::NotScalar(loss.shape().to_vec()));
        }
        if self.consumed.replace(true) {
            return Err(Error::GraphConsumed);
        }
        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Tensor<R>>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root) = loss.id else {
            return Ok(Gradients { grads });
        };
        grads[root] = Some(Tensor::full(loss.shape().to_vec(), R::one()));

        for i in (0..=root).rev() {
            let node = &mut nodes[i];
            let Some(adjoint) = node.adjoint.take() else {
                continue; // leaf: keep its gradient
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = adjoint(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                if let (Some(p), Some(pg)) = (parent, pg) {
                    match &mut grads[*p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        for node in nodes.iter_mut() {
            node.adjoint = None;
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of tracked leaves produced by one backward pass.
pub struct Gradients<R> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient with respect to `v`, or `None` if `v` is untracked or did not
    /// influence the loss.
    pub fn get(&self, v: &Var<R>) -> Option<&Tensor<R>> {
        v.id.and_then(|i| self.grads.get(i)).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: &Var<R>) -> Option<Tensor<R>> {
        v.id.and_then(|i| self.grads.get_mut(i)).and_then(Option::take)
    }
}

/// A named, trainable tensor with an accumulating gradient slot.
#[derive(Clone, Debug)]
pub struct Parameter<R> {
    name: String,
    value: Arc<Tensor<R>>,
    grad: Option<Tensor<R>>,
}

impl<R: Real> Parameter<R> {
    pub fn new(name: impl Into<String>, value: Tensor<R>) -> Self {
        Self { name: name.into(), value: Arc::new(value), grad: None }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<R> {
        &self.value
    }

    pub fn value_arc(&self) -> &Arc<Tensor<R>> {
        &self.value
    }

    /// Mutable access to the values; copies only if a graph still holds them.
    pub fn value_mut(&mut self) -> &mut Tensor<R> {
        Arc::make_mut(&mut self.value)
    }

    pub fn grad(&self) -> Option<&Tensor<R>> {
        self.grad.as_ref()
    }

    pub fn accumulate_grad(&mut self, g: &Tensor<R>) -> Result<()> {
        if g.shape() != self.value.shape() {
            return Err(Error::Shape(format!(
                "gradient {:?} for parameter {} of shape {:?}",
                g.shape(),
                self.name,
                self.value.shape()
            )));
        }
        match &mut self.grad {
            Some(acc) => acc.add_assign(g),
            None => self.grad = Some(g.clone()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}
