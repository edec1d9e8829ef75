//! Tape-based reverse-mode differentiation over a fixed operation set.
//!
//! Every forward op appends a node holding its value and what its
//! vector-Jacobian product needs. Nodes are appended after their parents, so
//! walking the tape backwards is a reverse topological order.

mod ops;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) use ops::{giou_loss_and_grad, Op};

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Trainable leaf: receives a gradient on [`Tape::backward`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Back-propagates a scalar loss into every trainable leaf.
    ///
    /// Gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        adj[loss.id] = Some(vec![1.0]);
        let mut grads = self.grads.borrow_mut();
        if grads.len() < nodes.len() {
            grads.resize(nodes.len(), None);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut grads[id] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                    slot => *slot = Some(g),
                }
                continue;
            }
            let mut sink = GradSink {
                nodes: &nodes,
                adj: &mut adj,
            };
            node.op.vjp(&node.value, &g, &mut sink);
        }
        Ok(())
    }

    /// Accumulated gradient of a trainable leaf, if any reached it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(var.id)?.as_ref()?;
        let shape = self.nodes.borrow()[var.id].value.shape().to_vec();
        Some(Tensor::new(shape, g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().iter_mut().for_each(|g| *g = None);
    }
}

/// Destination for parent adjoints during one node's VJP.
pub(crate) struct GradSink<'a> {
    nodes: &'a [Node],
    adj: &'a mut [Option<Vec<f64>>],
}

impl<'a> GradSink<'a> {
    pub(crate) fn wants(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    pub(crate) fn value(&self, id: usize) -> &'a Tensor {
        &self.nodes[id].value
    }

    /// Adds `g` into the adjoint of node `id`.
    pub(crate) fn add(&mut self, id: usize, g: Vec<f64>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut self.adj[id] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
            slot => *slot = Some(g),
        }
    }

    /// Adds `g` into `adj[id][offset..]`, allocating zeros if needed.
    pub(crate) fn add_at(&mut self, id: usize, offset: usize, g: &[f64]) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let len = self.nodes[id].value.len();
        let acc = self.adj[id].get_or_insert_with(|| vec![0.0; len]);
        acc[offset..offset + g.len()]
            .iter_mut()
            .zip(g)
            .for_each(|(a, v)| *a += v);
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }
}
