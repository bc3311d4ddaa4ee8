//! A minimal reverse-mode automatic differentiation tape.
//!
//! A [`Graph`] records one closure per differentiable operation. [`Var`]s hold
//! their forward value and, when they depend on a tracked leaf, the id of the
//! node that produced them. With recording disabled (inference) nothing is
//! kept and intermediates are freed as soon as they go out of scope.

mod attention;
mod conv;
mod ops;

pub use attention::{attention_probabilities, AttentionAxis};
pub use conv::ConvGeometry;

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::Tensor;

type BackwardFn = Box<dyn FnOnce(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
}

struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

/// Shared handle to a tape.
#[derive(Clone)]
pub struct Graph(Rc<RefCell<Tape>>);

impl Graph {
    /// A graph that records operations for a backward pass.
    pub fn new() -> Self {
        Graph(Rc::new(RefCell::new(Tape {
            nodes: Vec::new(),
            recording: true,
        })))
    }

    /// A graph that never records; all results are constants.
    pub fn inference() -> Self {
        Graph(Rc::new(RefCell::new(Tape {
            nodes: Vec::new(),
            recording: false,
        })))
    }

    pub fn is_recording(&self) -> bool {
        self.0.borrow().recording
    }

    /// A tracked leaf whose gradient will be reported by [`Graph::backward`].
    pub fn leaf(&self, value: Tensor) -> Var {
        let node = if self.is_recording() {
            let mut tape = self.0.borrow_mut();
            tape.nodes.push(Node {
                parents: Vec::new(),
                backward: None,
            });
            Some(tape.nodes.len() - 1)
        } else {
            None
        };
        Var {
            graph: self.clone(),
            node,
            value: Rc::new(value),
        }
    }

    /// An untracked input.
    pub fn constant(&self, value: Tensor) -> Var {
        Var {
            graph: self.clone(),
            node: None,
            value: Rc::new(value),
        }
    }

    /// Record the result of an operation. `backward` maps the output gradient to
    /// one optional gradient per parent, in order.
    pub(crate) fn record(
        &self,
        value: Tensor,
        parents: &[&Var],
        backward: impl FnOnce(&Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        let tracked = parents.iter().any(|p| p.node.is_some());
        let node = if tracked && self.is_recording() {
            let mut tape = self.0.borrow_mut();
            tape.nodes.push(Node {
                parents: parents.iter().map(|p| p.node).collect(),
                backward: Some(Box::new(backward)),
            });
            Some(tape.nodes.len() - 1)
        } else {
            None
        };
        Var {
            graph: self.clone(),
            node,
            value: Rc::new(value),
        }
    }

    /// Run the backward pass from a scalar `loss`. Consumes the recorded closures.
    pub fn backward(&self, loss: &Var) -> Gradients {
        assert_eq!(loss.value.numel(), 1, "backward needs a scalar loss");
        let Some(root) = loss.node else {
            return Gradients { grads: Vec::new() };
        };
        let mut nodes = std::mem::take(&mut self.0.borrow_mut().nodes);
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root] = Some(Tensor::full(loss.value.shape(), 1.0));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &mut nodes[id];
            match node.backward.take() {
                Some(f) => {
                    let parent_grads = f(&g);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (parent, pg) in node.parents.iter().zip(parent_grads) {
                        if let (Some(p), Some(pg)) = (parent, pg) {
                            match &mut grads[*p] {
                                Some(acc) => acc.add_assign(&pg),
                                slot => *slot = Some(pg),
                            }
                        }
                    }
                }
                // leaf: keep the gradient
                None => grads[id] = Some(g),
            }
        }
        Gradients { grads }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, looked up by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        var.node.and_then(|id| self.grads.get(id)).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros when it did not influence the loss.
    pub fn get_or_zeros(&self, var: &Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value.shape()))
    }
}

/// A value in a graph.
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    node: Option<usize>,
    value: Rc<Tensor>,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value.shape())
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        self.value.dims4()
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Take the value out, cloning only when it is still shared.
    pub fn into_value(self) -> Tensor {
        Rc::try_unwrap(self.value).unwrap_or_else(|rc| (*rc).clone())
    }
}

