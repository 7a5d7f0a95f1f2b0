use serde::{Deserialize, Serialize};

use crate::error::{structural, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Pointwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    /// tanh approximation of GELU.
    Gelu,
}

/// One node of a loss program. Inputs always refer to earlier nodes.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// The batch feature matrix `B×d`.
    Input,
    Param {
        name: String,
        shape: Vec<usize>,
    },
    Const(Tensor),
    /// `a · b`
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`, the layout used for `x Wᵀ` with `W` stored `out×in`.
    MatMulT(NodeId, NodeId),
    /// Matrix plus a row vector broadcast over rows.
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Act(NodeId, Activation),
    /// Mean softmax cross-entropy of `B×C` logits against the batch labels.
    SoftmaxCrossEntropy(NodeId),
    Sum(NodeId),
    Mean(NodeId),
}

impl Op {
    pub(crate) fn inputs(&self) -> Inputs {
        match *self {
            Op::Input | Op::Param { .. } | Op::Const(_) => Inputs::None,
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Mul(a, b) => Inputs::Two(a, b),
            Op::Scale(a, _)
            | Op::Act(a, _)
            | Op::SoftmaxCrossEntropy(a)
            | Op::Sum(a)
            | Op::Mean(a) => Inputs::One(a),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Inputs {
    None,
    One(NodeId),
    Two(NodeId, NodeId),
}

impl Inputs {
    pub fn any(self, mut f: impl FnMut(NodeId) -> bool) -> bool {
        match self {
            Inputs::None => false,
            Inputs::One(a) => f(a),
            Inputs::Two(a, b) => f(a) || f(b),
        }
    }
}

/// A scalar-valued differentiable program over named parameters and one batch.
///
/// This is the `model_fn` every gradient engine interprets: a primal pass,
/// a dual-number pass, or a primal pass followed by an adjoint sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    nodes: Vec<Op>,
    output: NodeId,
}

impl Graph {
    pub fn nodes(&self) -> &[Op] {
        &self.nodes
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    /// Parameter names referenced by the program, in first-use order.
    pub fn param_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = Vec::new();
        for op in &self.nodes {
            if let Op::Param { name, .. } = op {
                if !names.contains(&name.as_str()) {
                    names.push(name);
                }
            }
        }
        names
    }
}

#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Op>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.nodes.push(op);
        self.nodes.len() - 1
    }

    pub fn input(&mut self) -> NodeId {
        self.push(Op::Input)
    }

    pub fn param(&mut self, name: impl Into<String>, shape: &[usize]) -> NodeId {
        self.push(Op::Param {
            name: name.into(),
            shape: shape.to_vec(),
        })
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Const(t))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMulT(a, b))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddBias(a, bias))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.push(Op::Scale(a, s))
    }

    pub fn act(&mut self, a: NodeId, kind: Activation) -> NodeId {
        self.push(Op::Act(a, kind))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId) -> NodeId {
        self.push(Op::SoftmaxCrossEntropy(logits))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn finish(self, output: NodeId) -> Result<Graph> {
        if output >= self.nodes.len() {
            return Err(structural!("output node {} does not exist", output));
        }
        for (i, op) in self.nodes.iter().enumerate() {
            if op.inputs().any(|j| j >= i) {
                return Err(structural!("node {} refers to a later node", i));
            }
        }
        Ok(Graph {
            nodes: self.nodes,
            output,
        })
    }
}
