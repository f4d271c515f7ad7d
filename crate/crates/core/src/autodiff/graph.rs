//! Dynamic tape. Every op appends a node holding its value and, when any
//! input needs a gradient, a closure mapping the output gradient to input
//! gradients. Nodes only reference earlier nodes, so creation order is a
//! topological order and the reverse sweep is a plain descending loop.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::tensor::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<String>,
}

/// One forward pass worth of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        let mut t = t;
        t.set_requires_grad(false);
        self.push_node(Node {
            value: Rc::new(t),
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
            param: None,
        })
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        let mut t = t;
        t.set_requires_grad(false);
        self.push_node(Node {
            value: Rc::new(t),
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
            param: None,
        })
    }

    /// A leaf bound to a named parameter. It tracks gradients only if the
    /// parameter itself has `requires_grad` set.
    pub fn param<'g>(&'g self, params: &ParamSet, name: &str) -> Result<Var<'g>> {
        let t = params.get(name)?;
        let requires_grad = t.requires_grad();
        let value = Tensor::from_raw(t.shape().to_vec(), t.data().to_vec());
        Ok(self.push_node(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
            param: requires_grad.then(|| name.to_string()),
        }))
    }

    /// Records an op output. Values are checked for finiteness here so every
    /// op surfaces NaN/Inf at the point of creation.
    pub(crate) fn record<'g>(
        &'g self,
        op: &str,
        value: Tensor,
        parents: &[Var<'g>],
        backward: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Result<Var<'g>> {
        self.record_shared(op, Rc::new(value), parents, backward)
    }

    /// Like [`Graph::record`] for an output the backward closure also holds.
    pub(crate) fn record_shared<'g>(
        &'g self,
        op: &str,
        value: Rc<Tensor>,
        parents: &[Var<'g>],
        backward: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Result<Var<'g>> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(op));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let backward: Option<BackwardFn> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        Ok(self.push_node(Node {
            value,
            parents: parents.iter().map(|p| p.id).collect(),
            backward,
            requires_grad,
            param: None,
        }))
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(bw) = &node.backward {
                let parent_grads = bw(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !nodes[pid].requires_grad {
                        continue;
                    }
                    match &mut grads[pid] {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            // Leaves keep their gradient for the caller.
            if node.parents.is_empty() {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients {
            grads,
            params: nodes
                .iter()
                .enumerate()
                .filter_map(|(i, n)| n.param.clone().map(|p| (i, p)))
                .collect(),
        })
    }

    /// Backward and accumulate `scale * grad` into the bound parameters.
    /// Repeated calls accumulate; zero the set between optimizer steps.
    pub fn backward_into(&self, loss: Var<'_>, params: &mut ParamSet, scale: f64) -> Result<()> {
        self.backward(loss)?.accumulate_into(params, scale)
    }
}

/// Gradients from one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, String)>,
}

impl Gradients {
    /// Gradient for a leaf (or `None` if it is unreachable from the loss).
    pub fn wrt(&self, var: Var<'_>) -> Option<Tensor> {
        let g = self.grads.get(var.id)?.as_ref()?;
        let shape = var.shape();
        Some(Tensor::from_raw(shape, g.clone()))
    }

    pub fn accumulate_into(&self, params: &mut ParamSet, scale: f64) -> Result<()> {
        for (id, name) in &self.params {
            if let Some(Some(g)) = self.grads.get(*id) {
                params.get_mut(name)?.accumulate_grad(g, scale)?;
            }
        }
        Ok(())
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }

    /// Copy of the value detached from the tape.
    pub fn to_tensor(&self) -> Tensor {
        (*self.value()).clone()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }
}
