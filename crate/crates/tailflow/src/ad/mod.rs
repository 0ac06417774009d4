//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! The engine is a dynamic tape: every operation produces a fresh [`Node`]
//! holding its value plus, when gradients are being tracked, one edge per
//! differentiable input with a closure that maps the node's cotangent to that
//! input's contribution (a vector–Jacobian product). [`Node::backward`] walks
//! the tape once in reverse topological order and accumulates gradients into
//! every node that requires them.
//!
//! Conventions:
//! - all math is `f64`; there is no implicit precision change anywhere;
//! - elementwise binaries broadcast only scalar↔tensor; anything else must be
//!   shaped explicitly with [`Node::expand_rows`]/[`Node::expand_cols`];
//! - domain violations inside elementwise math (log of a nonpositive value,
//!   sqrt of a negative) follow IEEE semantics and propagate NaN rather than
//!   erroring — callers that need hard failures check [`Tensor::all_finite`];
//! - values are immutable once a node is built. Leaves created through
//!   [`Parameter`] are the one exception: the optimizer rewrites them between
//!   steps. A graph must therefore be consumed (backward + read) before its
//!   leaf values are updated.
//!
//! Repeated `backward` calls accumulate into existing gradients; call
//! [`Parameter::zero_grad`] (or [`Node::zero_grad`]) between steps.

mod grad_check;
mod ops;

pub use grad_check::{grad_check, GradCheckEntry, GradCheckReport};
pub use ops::{solve_tri, stack_cols};

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Runs `f` with gradient recording disabled: operations inside compute
/// values only and record no edges. Used for sampling and evaluation, where
/// building a tape would only cost memory.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Guard(bool);
    impl Drop for Guard {
        fn drop(&mut self) {
            NO_GRAD.with(|c| c.set(self.0));
        }
    }
    let _guard = Guard(NO_GRAD.with(|c| {
        let prev = c.get();
        c.set(true);
        prev
    }));
    f()
}

fn recording() -> bool {
    NO_GRAD.with(|c| !c.get())
}

/// Vector-Jacobian product: maps a node's cotangent to one parent's
/// gradient contribution.
pub(crate) type Vjp = Box<dyn Fn(&Tensor) -> Result<Tensor>>;

pub(crate) struct Edge {
    parent: Node,
    vjp: Vjp,
}

pub(crate) struct NodeInner {
    id: u64,
    value: RefCell<Tensor>,
    grad: RefCell<Option<Tensor>>,
    requires_grad: bool,
    edges: Vec<Edge>,
}

/// A value in the computation graph. Cloning is cheap (shared reference).
#[derive(Clone)]
pub struct Node {
    inner: Rc<NodeInner>,
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node")
            .field("id", &self.inner.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.inner.requires_grad)
            .field("n_edges", &self.inner.edges.len())
            .finish()
    }
}

impl Node {
    /// Leaf node; `requires_grad` marks it as a gradient sink.
    pub fn leaf(value: Tensor, requires_grad: bool) -> Node {
        Node {
            inner: Rc::new(NodeInner {
                id: fresh_id(),
                value: RefCell::new(value),
                grad: RefCell::new(None),
                requires_grad,
                edges: Vec::new(),
            }),
        }
    }

    /// Leaf that never receives gradients (masks, data batches, constants).
    pub fn constant(value: Tensor) -> Node {
        Node::leaf(value, false)
    }

    /// Scalar constant.
    pub fn scalar(v: f64) -> Node {
        Node::constant(Tensor::scalar(v))
    }

    /// Interior node; edges to parents that do not require gradients are
    /// dropped, and recording can be suppressed globally via [`no_grad`].
    pub(crate) fn from_op(value: Tensor, edges: Vec<Edge>) -> Node {
        let edges: Vec<Edge> = if recording() {
            edges.into_iter().filter(|e| e.parent.requires_grad()).collect()
        } else {
            Vec::new()
        };
        let requires_grad = !edges.is_empty();
        Node {
            inner: Rc::new(NodeInner {
                id: fresh_id(),
                value: RefCell::new(value),
                grad: RefCell::new(None),
                requires_grad,
                edges,
            }),
        }
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Copy of the node's value.
    pub fn value(&self) -> Tensor {
        self.inner.value.borrow().clone()
    }

    /// Runs `f` against the node's value without copying it.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.inner.value.borrow())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.value.borrow().shape().to_vec()
    }

    /// The value of a scalar node.
    pub fn scalar_value(&self) -> Result<f64> {
        self.inner.value.borrow().scalar_value()
    }

    /// Copy of the accumulated gradient, if any backward pass reached this
    /// node.
    pub fn grad(&self) -> Option<Tensor> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Scales the stored gradient in place (no-op when no gradient is
    /// stored); this is the mutation global-norm clipping needs.
    pub fn scale_grad(&self, c: f64) {
        if let Some(g) = self.inner.grad.borrow_mut().as_mut() {
            *g = g.scale(c);
        }
    }

    /// Overwrites a leaf's value (the optimizer's update path). Must not be
    /// called while a graph built on this leaf is still pending backward.
    pub fn set_value(&self, value: Tensor) {
        *self.inner.value.borrow_mut() = value;
    }

    fn accumulate_grad(&self, contribution: &Tensor) -> Result<()> {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => g.accumulate(contribution)?,
            None => *slot = Some(contribution.clone()),
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar root. Gradients accumulate into every
    /// reachable node with `requires_grad`; repeated calls keep accumulating.
    pub fn backward(&self) -> Result<()> {
        {
            let v = self.inner.value.borrow();
            if !v.is_scalar() {
                return Err(Error::NonScalarRoot { shape: v.shape().to_vec() });
            }
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Iterative post-order DFS along parent edges: children of the DFS
        // (graph inputs) are emitted before the node, so the reversed order
        // visits each node before any of its inputs.
        enum Frame {
            Enter(Node),
            Exit(Node),
        }
        let mut order: Vec<Node> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack = vec![Frame::Enter(self.clone())];
        while let Some(frame) = stack.pop() {
            match frame {
                Frame::Enter(node) => {
                    if !visited.insert(node.id()) {
                        continue;
                    }
                    stack.push(Frame::Exit(node.clone()));
                    for edge in &node.inner.edges {
                        if edge.parent.requires_grad() {
                            stack.push(Frame::Enter(edge.parent.clone()));
                        }
                    }
                }
                Frame::Exit(node) => order.push(node),
            }
        }

        // Cotangents for *this* sweep live in a scratch map so that repeated
        // backward calls accumulate into the persistent gradients without
        // re-propagating previously stored ones.
        let mut cotangent: HashMap<u64, Tensor> = HashMap::new();
        let seed = {
            let v = self.inner.value.borrow();
            Tensor::full(v.shape(), 1.0)
        };
        cotangent.insert(self.id(), seed);

        for node in order.iter().rev() {
            let g = match cotangent.get(&node.id()) {
                Some(g) => g.clone(),
                None => continue, // branch not reached by the cotangent flow
            };
            node.accumulate_grad(&g)?;
            for edge in &node.inner.edges {
                let contribution = (edge.vjp)(&g)?;
                match cotangent.get_mut(&edge.parent.id()) {
                    Some(existing) => existing.accumulate(&contribution)?,
                    None => {
                        cotangent.insert(edge.parent.id(), contribution);
                    }
                }
            }
        }
        Ok(())
    }
}

/// A named trainable leaf. Cloning shares the underlying node, so one
/// parameter can back several graph sites (e.g. a degrees-of-freedom value
/// shared across marginals).
#[derive(Clone)]
pub struct Parameter {
    name: String,
    node: Node,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Parameter {
        Parameter { name: name.into(), node: Node::leaf(value, true) }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn node(&self) -> &Node {
        &self.node
    }

    pub fn value(&self) -> Tensor {
        self.node.value()
    }

    pub fn set_value(&self, value: Tensor) {
        self.node.set_value(value);
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.node.grad()
    }

    pub fn zero_grad(&self) {
        self.node.zero_grad();
    }

    pub fn numel(&self) -> usize {
        self.node.inner.value.borrow().numel()
    }
}

impl std::fmt::Debug for Parameter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Parameter")
            .field("name", &self.name)
            .field("shape", &self.node.shape())
            .finish()
    }
}
