//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation whose inputs require gradients. Values
//! live behind `Rc`, so on a non-recording tape intermediates are dropped as
//! soon as the forward pass no longer references them.

mod ops;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    op: &'static str,
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape that records operations for a later [`Tape::backward`].
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that never records; used for inference.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        Var {
            tape: self,
            id: None,
            value: Rc::new(value),
        }
    }

    /// A differentiable input (parameter). On a non-recording tape this is a
    /// constant.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let id = self.recording.then(|| {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                op: "leaf",
                parents: Vec::new(),
                backward: None,
            });
            nodes.len() - 1
        });
        Var {
            tape: self,
            id,
            value: Rc::new(value),
        }
    }

    pub(crate) fn record<'t, F>(
        &'t self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[&Var<'t, T>],
        backward: F,
    ) -> Var<'t, T>
    where
        F: Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let needs_grad = self.recording && parents.iter().any(|p| p.id.is_some());
        let id = needs_grad.then(|| {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                op,
                parents: parents.iter().map(|p| p.id).collect(),
                backward: Some(Box::new(backward)),
            });
            nodes.len() - 1
        });
        Var {
            tape: self,
            id,
            value: Rc::new(value),
        }
    }

    /// Names of all recorded operations, in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op).collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gradients of the scalar `root` with respect to every recorded node.
    pub fn backward(&self, root: &Var<'_, T>) -> Result<Grads<T>> {
        if root.value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar root, got shape {:?}",
                root.value.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root_id) = root.id else {
            return Ok(Grads { grads });
        };
        grads[root_id] = Some(Tensor::full(root.value.shape().to_vec(), T::one()));
        for id in (0..=root_id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            for (parent, pg) in node.parents.iter().zip(backward(&g)) {
                if let (Some(p), Some(pg)) = (parent, pg) {
                    match &mut grads[*p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
        }
        Ok(Grads { grads })
    }
}

/// Result of [`Tape::backward`]; gradients are retained for leaves only.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        var.id.and_then(|id| self.grads.get(id)?.as_ref())
    }

    pub fn take(&mut self, var: &Var<'_, T>) -> Option<Tensor<T>> {
        var.id.and_then(|id| self.grads.get_mut(id)?.take())
    }
}

/// A tensor value bound to a tape.
#[derive(Clone)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: Option<usize>,
    value: Rc<Tensor<T>>,
}

impl<'t, T: Scalar> Var<'t, T> {
    #[inline]
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        (*self.value).clone()
    }
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .finish()
    }
}
