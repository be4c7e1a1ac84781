//! Tape of executed primitives and the reverse sweep over it.
//!
//! Every op appends one node holding its forward value. `backward` walks the
//! nodes in exact reverse execution order, so gradient accumulation (and thus
//! every floating-point sum) happens in a fixed order from run to run.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::ops::shape::SparseMap;
use crate::ops::{elementwise, linalg, nn, sample, shape};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Unary {
    Exp,
    Log,
    Sqrt,
    Tanh,
    Sigmoid,
    Gelu,
    Powf(f64),
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddSuffix(Var, Var),
    MulSuffix(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv3d {
        x: Var,
        w: Var,
        stride: [usize; 3],
        pad: [usize; 3],
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        x: Var,
        map: Rc<SparseMap>,
    },
    GridSample {
        x: Var,
        coords: Var,
    },
    Sum(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    MaxAxis {
        x: Var,
        argmax: Vec<usize>,
    },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Reverse-mode tape. Parameters are pulled from an optional [`ParamStore`]
/// and become leaves the first time they are referenced.
pub struct Graph<'p> {
    nodes: Vec<Node>,
    store: Option<&'p ParamStore>,
    param_vars: BTreeMap<String, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            param_vars: BTreeMap::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            nodes: Vec::new(),
            store: Some(store),
            param_vars: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives gradients.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf for a stored parameter; repeated calls return the same node so
    /// gradients from every use are summed.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
        let value = store.value(name)?.clone();
        let v = self.input(value);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends a derived node; it requires grad when any input does.
    pub(crate) fn derive(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        self.push(value, op, rg)
    }

    /// Runs the reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 || shape.iter().any(|&d| d != 1) {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut acc = GradAcc {
            grads: vec![None; self.nodes.len()],
        };
        acc.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = acc.grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backward_node(Var(idx), node, &gout, &mut acc);
            }
            acc.grads[idx] = Some(gout);
        }
        Ok(Gradients {
            grads: acc
                .grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| g.map(|d| Tensor::new(self.nodes[i].value.shape(), d).unwrap()))
                .collect(),
        })
    }

    fn backward_node(&self, out: Var, node: &Node, gout: &[f64], acc: &mut GradAcc) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(..)
            | Op::Sub(..)
            | Op::Mul(..)
            | Op::Div(..)
            | Op::AddSuffix(..)
            | Op::MulSuffix(..)
            | Op::Scale(..)
            | Op::AddScalar(..)
            | Op::Unary(..)
            | Op::Sum(..)
            | Op::SumAxis { .. }
            | Op::MaxAxis { .. } => elementwise::backward(self, out, &node.op, gout, acc),
            Op::MatMul { .. } => linalg::backward(self, out, &node.op, gout, acc),
            Op::Softmax { .. } | Op::LayerNorm { .. } | Op::GroupNorm { .. } | Op::Conv3d { .. } => {
                nn::backward(self, out, &node.op, gout, acc)
            }
            Op::Reshape(..)
            | Op::Permute { .. }
            | Op::Concat { .. }
            | Op::Narrow { .. }
            | Op::Gather { .. } => shape::backward(self, out, &node.op, gout, acc),
            Op::GridSample { .. } => sample::backward(self, out, &node.op, gout, acc),
        }
    }

    /// Gradient of every parameter referenced on this graph, by name.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.param_vars
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Gradient accumulator used during the reverse sweep.
pub(crate) struct GradAcc {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradAcc {
    pub(crate) fn add(&mut self, g: &Graph, v: Var, contrib: Vec<f64>) {
        if !g.requires_grad(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(&contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    /// Lazily allocates and returns the buffer for `v`, or `None` when `v`
    /// does not need a gradient.
    pub(crate) fn slot(&mut self, g: &Graph, v: Var) -> Option<&mut Vec<f64>> {
        if !g.requires_grad(v) {
            return None;
        }
        let n = g.value(v).numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` when unreachable.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}

pub(crate) fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(TensorError::AxisOutOfRange { op, axis, rank });
    }
    Ok(())
}
