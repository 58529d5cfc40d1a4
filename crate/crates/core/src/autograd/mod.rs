//! Minimal define-by-run reverse-mode differentiation over `f64` tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`]s together with a
//! closure that maps the output gradient to input gradients. Calling
//! [`Tape::backward`] walks the record in reverse. Nodes whose inputs do not
//! require gradients store no closure, so constant inputs (images, labels,
//! detached teachers) cost nothing on the way back.

mod kernels;
mod ops;

pub use ops::{NormKind, NormStats};
pub(crate) use ops::{softmax_slice, split5};

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

pub type Tensor = ArrayD<f64>;

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Records operations for a single forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A differentiable input (parameter or probe).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), true, Vec::new(), None)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), false, Vec::new(), None)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        value: Rc<Tensor>,
        requires_grad: bool,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            requires_grad,
            parents,
            backward,
        });
        Var { tape: self, id }
    }

    /// Records the result of an operation. The closure is kept only when at
    /// least one parent requires a gradient.
    pub(crate) fn record(
        &self,
        value: Tensor,
        parents: &[Var<'_>],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'_> {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        if requires_grad {
            self.push(Rc::new(value), true, ids, Some(Box::new(backward)))
        } else {
            self.push(Rc::new(value), false, Vec::new(), None)
        }
    }

    /// Reverse pass from a scalar root. Returns gradients for every node that
    /// requires one; intermediate gradients are released as soon as they have
    /// been propagated.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let root_node = &nodes[root.id];
        if !root_node.requires_grad {
            return Gradients { grads };
        }
        grads[root.id] = Some(Tensor::ones(root_node.value.raw_dim()));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let flags: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &flags);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `var`, or `None` when the root does not
    /// depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but returns zeros for unreached variables.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().raw_dim()))
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Value of a 0-d (scalar) variable.
    pub fn scalar(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.len(), 1);
        v.iter().copied().next().unwrap_or(f64::NAN)
    }

    /// Same value, cut off from the gradient flow.
    pub fn detach(&self) -> Var<'t> {
        self.tape.push(self.value(), false, Vec::new(), None)
    }
}

pub(crate) fn scalar_tensor(v: f64) -> Tensor {
    Tensor::from_elem(IxDyn(&[]), v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unreached_leaf_has_no_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(scalar_tensor(2.0));
        let b = tape.leaf(scalar_tensor(3.0));
        let y = a.scale(4.0);
        let g = tape.backward(y);
        assert_eq!(g.get(a).unwrap()[IxDyn(&[])], 4.0);
        assert!(g.get(b).is_none());
        assert_eq!(g.get_or_zeros(b)[IxDyn(&[])], 0.0);
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let a = tape.leaf(scalar_tensor(2.0));
        let y = a.add(&a.scale(3.0));
        let g = tape.backward(y);
        assert_eq!(g.get(a).unwrap()[IxDyn(&[])], 4.0);
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(scalar_tensor(2.0));
        let y = a.detach().scale(3.0).add(&a);
        let g = tape.backward(y);
        assert_eq!(g.get(a).unwrap()[IxDyn(&[])], 1.0);
    }

    #[test]
    fn constants_store_no_closure() {
        let tape = Tape::new();
        let c = tape.constant(scalar_tensor(1.0));
        let y = c.scale(2.0);
        assert!(!y.requires_grad());
        let g = tape.backward(y);
        assert!(g.get(c).is_none());
    }
}
