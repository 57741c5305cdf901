//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape of recorded primitive operations. Every primitive
//! appends one node holding its output value, the ids of its operands and a
//! backward rule. Node ids grow monotonically, so the tape is always in
//! topological order and [`Var::backward`] is a single reverse sweep that
//! visits each node once.
//!
//! Trainable parameters live outside the graph as [`Param`]s. Binding a
//! parameter with [`Graph::param`] creates a gradient-carrying leaf; after
//! the backward pass [`Graph::param_grad`] returns its accumulated gradient.
//! The training loops build a fresh graph per minibatch.

mod check;
mod conv;
mod norm;
mod ops;

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub use check::{gradient_check, gradient_check_all, relative_error};
pub use conv::conv_out_size;
pub use norm::BatchStats;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub(crate) struct BackwardArgs<'a, F> {
    pub inputs: &'a [Rc<Tensor<F>>],
    pub output: &'a Tensor<F>,
    pub grad: &'a Tensor<F>,
    /// Which operands need a gradient; rules may skip the others.
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn<F> = Box<dyn Fn(&BackwardArgs<'_, F>) -> Vec<Option<Tensor<F>>>>;

struct Node<F> {
    value: Rc<Tensor<F>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<F>>,
    requires_grad: bool,
    grad: Option<Tensor<F>>,
}

/// Recorded computation for one forward/backward cycle.
pub struct Graph<F: Element> {
    nodes: RefCell<Vec<Node<F>>>,
    bound: RefCell<HashMap<u64, usize>>,
}

impl<F: Element> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Tensor<F>, requires_grad: bool, what: &str) -> Result<Var<'_, F>> {
        if !value.is_finite() {
            return Err(Error::NonFinite(what.to_string()));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
            grad: None,
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<F>) -> Result<Var<'_, F>> {
        self.push_leaf(value, false, "constant input")
    }

    /// A free variable that accumulates a gradient.
    pub fn leaf(&self, value: Tensor<F>) -> Result<Var<'_, F>> {
        self.push_leaf(value, true, "leaf input")
    }

    /// Binds a parameter as a gradient-carrying leaf. Binding the same
    /// parameter twice returns the same node.
    pub fn param(&self, p: &Param<F>) -> Result<Var<'_, F>> {
        if let Some(&id) = self.bound.borrow().get(&p.key) {
            return Ok(Var { graph: self, id });
        }
        let v = self.push_leaf(p.value.clone(), true, &p.name)?;
        self.bound.borrow_mut().insert(p.key, v.id);
        Ok(v)
    }

    /// Gradient accumulated on a bound parameter, if it took part in a
    /// backward pass.
    pub fn param_grad(&self, p: &Param<F>) -> Option<Tensor<F>> {
        let id = *self.bound.borrow().get(&p.key)?;
        self.nodes.borrow()[id].grad.clone()
    }

    /// Copies a value into the graph as a constant, cutting gradient flow.
    pub fn detach<'g>(&'g self, v: Var<'_, F>) -> Var<'g, F> {
        let value = v.value();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
            grad: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Appends an operation's output. `op` names the primitive in errors.
    pub(crate) fn record(
        &self,
        op: &str,
        value: Tensor<F>,
        parents: &[usize],
        backward: BackwardFn<F>,
    ) -> Result<Var<'_, F>> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {op}")));
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            grad: None,
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    fn backward_from(&self, root: usize) -> Result<()> {
        let mut pending: Vec<Option<Tensor<F>>> = Vec::new();
        {
            let nodes = self.nodes.borrow();
            let rv = &nodes[root].value;
            if !rv.is_scalar() {
                return Err(Error::NonScalarRoot(rv.shape().to_vec()));
            }
            if !nodes[root].requires_grad {
                return Ok(());
            }
            pending.resize_with(root + 1, || None);
            pending[root] = Some(Tensor::full(rv.shape(), F::one()));

            for id in (0..=root).rev() {
                let node = &nodes[id];
                let Some(rule) = node.backward.as_ref() else {
                    continue;
                };
                let Some(grad) = pending[id].take() else {
                    continue;
                };
                let inputs: Vec<Rc<Tensor<F>>> =
                    node.parents.iter().map(|&p| nodes[p].value.clone()).collect();
                let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                let grads = rule(&BackwardArgs {
                    inputs: &inputs,
                    output: &node.value,
                    grad: &grad,
                    needs: &needs,
                });
                debug_assert_eq!(grads.len(), node.parents.len());
                for (&p, g) in node.parents.iter().zip(grads) {
                    let Some(g) = g else { continue };
                    if !nodes[p].requires_grad {
                        continue;
                    }
                    if !g.is_finite() {
                        return Err(Error::NonFinite(format!("gradient flowing into node {p}")));
                    }
                    match &mut pending[p] {
                        Some(acc) => acc.add_assign(&g)?,
                        slot => *slot = Some(g),
                    }
                }
            }
        }
        // What is left in `pending` belongs to leaves.
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in pending.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut nodes[id];
            if node.backward.is_some() || !node.requires_grad {
                continue;
            }
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g)?,
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, F: Element> {
    graph: &'g Graph<F>,
    id: usize,
}

impl<'g, F: Element> Var<'g, F> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<F> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<F>> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// The value of a one-element node.
    pub fn item(&self) -> F {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self) -> Option<Tensor<F>> {
        self.graph.nodes.borrow()[self.id].grad.clone()
    }

    /// Propagates d(self)/d(leaf) into every gradient-carrying leaf.
    /// Calling it again adds to the existing leaf gradients.
    pub fn backward(&self) -> Result<()> {
        self.graph.backward_from(self.id)
    }
}

static NEXT_PARAM_KEY: AtomicU64 = AtomicU64::new(1);

/// A named trainable tensor together with its gradient buffer.
#[derive(Debug)]
pub struct Param<F> {
    name: String,
    key: u64,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

impl<F: Element> Param<F> {
    pub fn new(name: impl Into<String>, value: Tensor<F>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            key: NEXT_PARAM_KEY.fetch_add(1, Ordering::Relaxed),
            value,
            grad,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    /// Adds the gradient the graph computed for this parameter, if any.
    pub fn accumulate_from(&mut self, graph: &Graph<F>) -> Result<()> {
        if let Some(g) = graph.param_grad(self) {
            self.grad.add_assign(&g)?;
        }
        Ok(())
    }
}

impl<F: Clone> Clone for Param<F> {
    /// Clones get a fresh binding key so that a copied network can share a
    /// graph with its source.
    fn clone(&self) -> Self {
        Self {
            name: self.name.clone(),
            key: NEXT_PARAM_KEY.fetch_add(1, Ordering::Relaxed),
            value: self.value.clone(),
            grad: self.grad.clone(),
        }
    }
}
