//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every primitive's backward rule is itself written with the primitives in
//! [`ops`], so a gradient obtained with `create_graph = true` is an ordinary
//! graph-tracked [`Var`] and can be differentiated again. This is what lets
//! a loss that contains input gradients be minimized with respect to the
//! parameters.
//!
//! Graphs are `Rc`-linked and single-threaded. Node ids are handed out from a
//! per-thread counter, so parents always carry smaller ids than their
//! children and sorting by id gives a topological order.

mod backward;
mod fd;
mod ops;

use std::cell::Cell;
use std::fmt;
use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use backward::{grad, grad_one};
pub use fd::finite_difference_gradient;
pub(crate) use ops::sign_tensor;
pub use ops::Op;

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

/// True unless inside [`no_grad`].
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

struct GradModeGuard(bool);

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.0));
    }
}

fn set_grad_enabled(on: bool) -> GradModeGuard {
    GradModeGuard(GRAD_ENABLED.with(|g| g.replace(on)))
}

/// Runs `f` with graph recording switched off: every op yields constants.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = set_grad_enabled(false);
    f()
}

pub(crate) struct Node<S: Scalar> {
    id: u64,
    value: Tensor<S>,
    op: Op<S>,
    parents: Vec<Var<S>>,
    tracked: bool,
}

/// A tensor value that may participate in a differentiable graph.
pub struct Var<S: Scalar>(Rc<Node<S>>);

impl<S: Scalar> Clone for Var<S> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<S: Scalar> fmt::Debug for Var<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("op", &self.0.op.name())
            .field("shape", &self.0.value.shape())
            .field("tracked", &self.0.tracked)
            .finish()
    }
}

impl<S: Scalar> Var<S> {
    /// Graph leaf whose gradient can be requested.
    pub fn leaf(value: Tensor<S>) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            op: Op::Leaf,
            parents: Vec::new(),
            tracked: true,
        }))
    }

    /// Untracked value; gradients never flow into it.
    pub fn constant(value: Tensor<S>) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            op: Op::Leaf,
            parents: Vec::new(),
            tracked: false,
        }))
    }

    pub(crate) fn from_op(value: Tensor<S>, op: Op<S>, parents: Vec<Var<S>>) -> Self {
        let tracked = grad_enabled() && parents.iter().any(Var::requires_grad);
        if !tracked {
            return Self::constant(value);
        }
        Var(Rc::new(Node {
            id: next_id(),
            value,
            op,
            parents,
            tracked: true,
        }))
    }

    pub fn value(&self) -> &Tensor<S> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.tracked
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn op(&self) -> &Op<S> {
        &self.0.op
    }

    pub(crate) fn parents(&self) -> &[Var<S>] {
        &self.0.parents
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    pub fn item(&self) -> crate::Result<S> {
        self.0.value.item()
    }
}
