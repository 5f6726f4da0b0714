//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every operation appends a node holding its output value and the indices
//! of its parents, so nodes are always in topological order. [`Tape::backward`]
//! walks the nodes once in reverse. A tape lives for a single training step.

mod backward;
mod ops;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use ops::{BinaryKind, Elementwise, UnaryKind};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op<S> {
    Leaf,
    Binary { kind: BinaryKind, a: usize, b: usize },
    Unary { kind: UnaryKind<S>, x: usize },
    Sum { x: usize },
    Reshape { x: usize },
    Matmul { a: usize, b: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    Conv3d { x: usize, w: usize, b: Option<usize>, stride_t: usize, pad: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<S>, inv_std: Vec<S>, training: bool },
    PixelShuffle { x: usize, r: usize },
    PixelUnshuffle { x: usize, r: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    SumPool { x: usize, n: usize },
    Upsample { x: usize, n: usize },
    Subsample { x: usize, stride: usize },
}

#[derive(Clone, Debug)]
pub(crate) struct Node<S> {
    pub value: Tensor<S>,
    pub op: Op<S>,
    pub requires_grad: bool,
    pub param: Option<ParamId>,
}

/// Recorded forward computation.
#[derive(Clone, Debug, Default)]
pub struct Tape<S: Scalar = f64> {
    pub(crate) nodes: Vec<Node<S>>,
    params: HashMap<(u64, ParamId), Var>,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// require gradients.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Brings a stored parameter onto the tape. Repeated calls for the same
    /// id return the same node, so every use accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let t = store.get(id);
        let requires = t.requires_grad();
        let value = Tensor::new(t.shape(), t.data().to_vec()).expect("stored tensor is well-formed");
        let v = self.push(value, Op::Leaf, requires);
        self.nodes[v.0].param = Some(id);
        self.params.insert(key, v);
        v
    }

    /// Copies a value off the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Parents of a node, in argument order.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents().into_iter().map(Var).collect()
    }

    /// Propagates gradients from a scalar `loss` back through the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let value = &self.nodes[loss.0].value;
        if value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                value.shape()
            )));
        }
        backward::run(self, loss.0)
    }

    /// Runs backward and adds the parameter gradients into `store`.
    /// Trainable parameters the loss does not reach get a zero gradient.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<S>) -> Result<Gradients<S>> {
        let grads = self.backward(loss)?;
        for (&(uid, id), &v) in &self.params {
            if uid != store.uid() {
                continue;
            }
            if let Some(g) = grads.get(v) {
                store.get_mut(id).accumulate_grad(g)?;
            }
        }
        store.ensure_grads();
        Ok(grads)
    }
}

impl<S> Op<S> {
    pub(crate) fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } | Op::Matmul { a, b } => vec![*a, *b],
            Op::Unary { x, .. }
            | Op::Sum { x }
            | Op::Reshape { x }
            | Op::PixelShuffle { x, .. }
            | Op::PixelUnshuffle { x, .. }
            | Op::Narrow { x, .. }
            | Op::SumPool { x, .. }
            | Op::Upsample { x, .. }
            | Op::Subsample { x, .. } => vec![*x],
            Op::Conv2d { x, w, b, .. } | Op::Conv3d { x, w, b, .. } => {
                let mut p = vec![*x, *w];
                p.extend(b.iter().copied());
                p
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}
