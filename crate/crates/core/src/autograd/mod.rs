//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Each node
//! keeps its forward value and, when any input requires a gradient, a
//! closure computing the input gradients from the output gradient.
//! Parameters enter the tape through [`Graph::param`]; only parameters whose
//! group is marked trainable on the graph receive gradients.

mod ops;
pub(crate) use ops::nchw_to_rows;
mod params;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

pub use params::{GroupMask, Param, ParamGroup, ParamId, ParamStore};

use crate::tensor::Tensor;

/// Computes input gradients given `(grad_output, inputs, output)`.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    record: bool,
    trainable: GroupMask,
}

impl Graph {
    /// A recording graph where every parameter group is trainable.
    pub fn new() -> Self {
        Self::with_trainable(GroupMask::all())
    }

    pub fn with_trainable(trainable: GroupMask) -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            record: true,
            trainable,
        }
    }

    /// A graph that records no backward closures.
    pub fn inference() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            record: false,
            trainable: GroupMask::none(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
            param: None,
        })
    }

    /// A free variable whose gradient is reported by [`Grads::wrt`].
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: self.record,
            param: None,
        })
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(Node {
            value: Rc::new(p.value.clone()),
            parents: Vec::new(),
            backward: None,
            requires_grad: self.record && self.trainable.contains(p.group),
            param: Some(id),
        })
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Records an operation. The closure is dropped when no input needs a
    /// gradient.
    pub fn op<F>(&self, parents: &[Var], value: Tensor, backward: F) -> Var
    where
        F: Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>> + 'static,
    {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            self.record && parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        self.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
            param: None,
        })
    }

    /// Gradients of the scalar `loss` with respect to every leaf and
    /// trainable parameter.
    pub fn backward(&self, loss: Var) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.0].value.numel(),
            1,
            "backward needs a scalar loss"
        );
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        let mut out = Grads::default();
        if !nodes[loss.0].requires_grad {
            return out;
        }
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            let Some(grad) = grads[i].take() else {
                continue;
            };
            if node.parents.is_empty() {
                match node.param {
                    Some(id) => match out.params.get_mut(&id) {
                        Some(g) => g.add_assign(&grad),
                        None => {
                            out.params.insert(id, grad);
                        }
                    },
                    None => {
                        out.leaves.insert(i, grad);
                    }
                }
                continue;
            }
            let Some(backward) = &node.backward else {
                continue;
            };
            let inputs: Vec<Rc<Tensor>> = node
                .parents
                .iter()
                .map(|&p| Rc::clone(&nodes[p].value))
                .collect();
            let refs: Vec<&Tensor> = inputs.iter().map(|t| t.as_ref()).collect();
            let parent_grads = backward(&grad, &refs, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "gradient shape mismatch");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        out
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Default, Debug)]
pub struct Grads {
    leaves: BTreeMap<usize, Tensor>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_accumulates_over_reuse() {
        let g = Graph::new();
        let x = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let y = g.mul(x, x);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let g = Graph::new();
        let x = g.constant(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let y = g.leaf(Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        let s = g.sum(g.mul(x, y));
        let grads = g.backward(s);
        assert!(grads.wrt(x).is_none());
        assert_eq!(grads.wrt(y).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn frozen_groups_receive_nothing() {
        let mut store = ParamStore::default();
        let a = store.add("a", ParamGroup::Restoration, Tensor::full(&[1], 2.0));
        let b = store.add("b", ParamGroup::Adaptation, Tensor::full(&[1], 3.0));
        let g = Graph::with_trainable(GroupMask::only(ParamGroup::Adaptation));
        let va = g.param(&store, a);
        let vb = g.param(&store, b);
        let s = g.sum(g.mul(va, vb));
        let grads = g.backward(s);
        assert!(grads.param(a).is_none());
        assert_eq!(grads.param(b).unwrap().data(), &[2.0]);
    }
}
