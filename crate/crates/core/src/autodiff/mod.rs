//! Gradient engines over a fixed set of differentiable primitives.
//!
//! Three interchangeable engines interpret the same [`Graph`]:
//!
//! * forward mode ([`jvp`]): one pass of dual-number arithmetic yields the
//!   loss and the directional derivative `∇f(w)·v`;
//! * reverse mode ([`reverse_grad`]): a primal pass followed by an adjoint
//!   sweep yields exact gradients;
//! * zero order ([`zero_order_grad`]): two primal passes at `w ± εv`.
//!
//! Frozen parameters always carry a zero tangent and receive no gradient.

mod dual;
mod graph;
pub mod primitives;

pub use dual::DualTensor;
pub use graph::{Activation, Graph, GraphBuilder, NodeId, Op};

use serde::{Deserialize, Serialize};

use crate::error::{argument, structural, Error, Result};
use crate::model::ParamStore;
use crate::tensor::{Tensor, TensorMap};

/// Features `B×d` and their integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self> {
        let (rows, _) = features.dims2()?;
        if rows != labels.len() {
            return Err(structural!(
                "{} feature rows but {} labels",
                rows,
                labels.len()
            ));
        }
        if rows == 0 {
            return Err(argument!("batch must be nonempty"));
        }
        Ok(Self { features, labels })
    }

    /// A one-row placeholder batch for programs that ignore their input.
    pub fn unit() -> Self {
        Self {
            features: Tensor::zeros(&[1, 1]),
            labels: vec![0],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Forward,
    Reverse,
    ZeroOrder,
}

/// A gradient (exact or estimated) for every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEstimate {
    pub grads: TensorMap,
    pub kind: EstimatorKind,
    pub loss: f64,
}

fn lookup<'a>(store: &'a ParamStore, name: &str, shape: &[usize]) -> Result<&'a Tensor> {
    let t = store
        .get(name)
        .ok_or_else(|| structural!("model needs parameter `{}` which is missing", name))?;
    if t.shape() != shape {
        return Err(structural!(
            "parameter `{}` has shape {:?}, model expects {:?}",
            name,
            t.shape(),
            shape
        ));
    }
    Ok(t)
}

fn scalar_output(t: &Tensor) -> Result<f64> {
    let v = t
        .item()
        .map_err(|_| structural!("model output must be a scalar, got shape {:?}", t.shape()))?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {}", v)));
    }
    Ok(v)
}

struct PrimalPass {
    values: Vec<Tensor>,
    /// Softmax probabilities cached by cross-entropy nodes.
    probs: Vec<Option<Tensor>>,
}

fn primal_pass(graph: &Graph, store: &ParamStore, batch: &Batch, keep_probs: bool) -> Result<PrimalPass> {
    let nodes = graph.nodes();
    let mut values: Vec<Tensor> = Vec::with_capacity(nodes.len());
    let mut probs = Vec::with_capacity(if keep_probs { nodes.len() } else { 0 });
    for op in nodes {
        let mut p = None;
        let v = match op {
            Op::Input => batch.features.clone(),
            Op::Param { name, shape } => lookup(store, name, shape)?.clone(),
            Op::Const(t) => t.clone(),
            Op::MatMul(a, b) => values[*a].matmul(&values[*b])?,
            Op::MatMulT(a, b) => values[*a].matmul_t(&values[*b])?,
            Op::AddBias(a, b) => primitives::add_bias(&values[*a], &values[*b])?,
            Op::Add(a, b) => values[*a].add(&values[*b])?,
            Op::Mul(a, b) => values[*a].zip_map(&values[*b], |x, y| x * y)?,
            Op::Scale(a, s) => values[*a].scale(*s),
            Op::Act(a, kind) => primitives::activation(&values[*a], *kind),
            Op::SoftmaxCrossEntropy(a) => {
                let (loss, pr) = primitives::softmax_cross_entropy(&values[*a], &batch.labels)?;
                p = Some(pr);
                Tensor::scalar(loss)
            }
            Op::Sum(a) => Tensor::scalar(values[*a].sum()),
            Op::Mean(a) => Tensor::scalar(values[*a].sum() / values[*a].numel().max(1) as f64),
        };
        values.push(v);
        if keep_probs {
            probs.push(p);
        }
    }
    Ok(PrimalPass { values, probs })
}

/// Primal value of the program's output node, whatever its shape.
pub fn evaluate(graph: &Graph, params: &ParamStore, batch: &Batch) -> Result<Tensor> {
    let mut pass = primal_pass(graph, params, batch, false)?;
    Ok(pass.values.swap_remove(graph.output()))
}

/// Mean loss of the program on `batch`.
pub fn forward_loss(graph: &Graph, params: &ParamStore, batch: &Batch) -> Result<f64> {
    let pass = primal_pass(graph, params, batch, false)?;
    scalar_output(&pass.values[graph.output()])
}

/// Tangents must cover exactly the trainable parameters, with matching shapes.
fn check_tangents(params: &ParamStore, tangents: &TensorMap) -> Result<()> {
    for name in params.trainable_names() {
        let t = tangents
            .get(name)
            .ok_or_else(|| structural!("missing tangent for trainable parameter `{}`", name))?;
        let p = params.get(name).expect("trainable name exists");
        p.ensure_same_shape(t, name)?;
    }
    for name in tangents.keys() {
        if !params.is_trainable(name) {
            return Err(structural!(
                "tangent given for `{}`, which is not a trainable parameter",
                name
            ));
        }
    }
    Ok(())
}

/// One dual-number pass: returns `(loss, ∇f(w)·v)`.
pub fn jvp(graph: &Graph, params: &ParamStore, tangents: &TensorMap, batch: &Batch) -> Result<(f64, f64)> {
    check_tangents(params, tangents)?;
    let nodes = graph.nodes();
    let mut values: Vec<DualTensor> = Vec::with_capacity(nodes.len());
    for op in nodes {
        let v = match op {
            Op::Input => DualTensor::constant(batch.features.clone()),
            Op::Param { name, shape } => {
                let p = lookup(params, name, shape)?.clone();
                match tangents.get(name) {
                    Some(t) => DualTensor::new(p, t.clone())?,
                    None => DualTensor::constant(p),
                }
            }
            Op::Const(t) => DualTensor::constant(t.clone()),
            Op::MatMul(a, b) => values[*a].matmul(&values[*b])?,
            Op::MatMulT(a, b) => values[*a].matmul_t(&values[*b])?,
            Op::AddBias(a, b) => values[*a].add_bias(&values[*b])?,
            Op::Add(a, b) => values[*a].add(&values[*b])?,
            Op::Mul(a, b) => values[*a].mul(&values[*b])?,
            Op::Scale(a, s) => values[*a].scale(*s),
            Op::Act(a, kind) => values[*a].act(*kind)?,
            Op::SoftmaxCrossEntropy(a) => values[*a].softmax_cross_entropy(&batch.labels)?,
            Op::Sum(a) => values[*a].sum(),
            Op::Mean(a) => values[*a].mean(),
        };
        values.push(v);
    }
    let out = &values[graph.output()];
    let loss = scalar_output(&out.primal)?;
    let dir = match out.tangent_ref() {
        Some(t) => t.item()?,
        None => 0.0,
    };
    if !dir.is_finite() {
        return Err(Error::NonFinite(format!("jvp evaluated to {}", dir)));
    }
    Ok((loss, dir))
}

/// The forward-gradient estimate `jvp · v`, one tensor per tangent.
pub fn forward_gradient(jvp: f64, tangents: &TensorMap, loss: f64) -> GradEstimate {
    GradEstimate {
        grads: tangents
            .iter()
            .map(|(k, v)| (k.clone(), v.scale(jvp)))
            .collect(),
        kind: EstimatorKind::Forward,
        loss,
    }
}

fn accumulate(slot: &mut Option<Tensor>, value: Tensor) -> Result<()> {
    match slot {
        Some(acc) => acc.axpy(1.0, &value),
        None => {
            *slot = Some(value);
            Ok(())
        }
    }
}

/// Exact gradients of every trainable parameter by an adjoint sweep.
pub fn reverse_grad(graph: &Graph, params: &ParamStore, batch: &Batch) -> Result<GradEstimate> {
    let pass = primal_pass(graph, params, batch, true)?;
    let nodes = graph.nodes();
    let out = graph.output();
    let loss = scalar_output(&pass.values[out])?;

    let mut needs = vec![false; nodes.len()];
    for (i, op) in nodes.iter().enumerate() {
        needs[i] = match op {
            Op::Param { name, .. } => params.is_trainable(name),
            other => other.inputs().any(|j| needs[j]),
        };
    }

    let mut grads: TensorMap = params
        .trainable_names()
        .into_iter()
        .map(|n| (n.to_string(), Tensor::zeros(params.get(n).unwrap().shape())))
        .collect();

    let mut adj: Vec<Option<Tensor>> = vec![None; nodes.len()];
    if needs[out] {
        adj[out] = Some(Tensor::filled(pass.values[out].shape(), 1.0));
    }
    let v = &pass.values;
    for i in (0..=out).rev() {
        if !needs[i] {
            continue;
        }
        let Some(g) = adj[i].take() else { continue };
        match &nodes[i] {
            Op::Param { name, .. } => {
                grads
                    .get_mut(name)
                    .expect("trainable param has a gradient slot")
                    .axpy(1.0, &g)?;
            }
            Op::Input | Op::Const(_) => {}
            Op::MatMul(a, b) => {
                if needs[*a] {
                    accumulate(&mut adj[*a], g.matmul_t(&v[*b])?)?;
                }
                if needs[*b] {
                    accumulate(&mut adj[*b], v[*a].t_matmul(&g)?)?;
                }
            }
            Op::MatMulT(a, b) => {
                if needs[*a] {
                    accumulate(&mut adj[*a], g.matmul(&v[*b])?)?;
                }
                if needs[*b] {
                    accumulate(&mut adj[*b], g.t_matmul(&v[*a])?)?;
                }
            }
            Op::AddBias(a, b) => {
                if needs[*b] {
                    accumulate(&mut adj[*b], primitives::bias_adjoint(&g, &v[*b])?)?;
                }
                if needs[*a] {
                    accumulate(&mut adj[*a], g)?;
                }
            }
            Op::Add(a, b) => {
                if needs[*b] {
                    accumulate(&mut adj[*b], g.clone())?;
                }
                if needs[*a] {
                    accumulate(&mut adj[*a], g)?;
                }
            }
            Op::Mul(a, b) => {
                if needs[*a] {
                    accumulate(&mut adj[*a], g.zip_map(&v[*b], |x, y| x * y)?)?;
                }
                if needs[*b] {
                    accumulate(&mut adj[*b], g.zip_map(&v[*a], |x, y| x * y)?)?;
                }
            }
            Op::Scale(a, s) => accumulate(&mut adj[*a], g.scale(*s))?,
            Op::Act(a, kind) => {
                let d = primitives::activation_derivative(&v[*a], &v[i], *kind);
                accumulate(&mut adj[*a], g.zip_map(&d, |x, y| x * y)?)?;
            }
            Op::SoftmaxCrossEntropy(a) => {
                let probs = pass.probs[i].as_ref().expect("probabilities cached");
                let seed = g.item()?;
                accumulate(
                    &mut adj[*a],
                    primitives::softmax_cross_entropy_adjoint(probs, &batch.labels, seed)?,
                )?;
            }
            Op::Sum(a) => accumulate(&mut adj[*a], Tensor::filled(v[*a].shape(), g.item()?))?,
            Op::Mean(a) => {
                let n = v[*a].numel().max(1) as f64;
                accumulate(&mut adj[*a], Tensor::filled(v[*a].shape(), g.item()? / n))?
            }
        }
    }
    Ok(GradEstimate {
        grads,
        kind: EstimatorKind::Reverse,
        loss,
    })
}

/// `params` with `scale · v` added to every trainable tensor.
pub(crate) fn shifted(params: &ParamStore, v: &TensorMap, scale: f64) -> Result<ParamStore> {
    let mut out = params.clone();
    for (name, dir) in v {
        out.get_mut(name)
            .ok_or_else(|| structural!("unknown parameter `{}`", name))?
            .axpy(scale, dir)?;
    }
    Ok(out)
}

/// Central-difference estimate `((f(w+εv) − f(w−εv)) / 2ε) · v`.
///
/// Uses exactly two primal passes; the reported loss is their mean.
pub fn zero_order_grad(
    graph: &Graph,
    params: &ParamStore,
    batch: &Batch,
    v: &TensorMap,
    eps: f64,
) -> Result<GradEstimate> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(argument!("finite-difference step must be positive, got {}", eps));
    }
    check_tangents(params, v)?;
    let plus = forward_loss(graph, &shifted(params, v, eps)?, batch)?;
    let minus = forward_loss(graph, &shifted(params, v, -eps)?, batch)?;
    let fd = (plus - minus) / (2.0 * eps);
    Ok(GradEstimate {
        grads: v.iter().map(|(k, t)| (k.clone(), t.scale(fd))).collect(),
        kind: EstimatorKind::ZeroOrder,
        loss: 0.5 * (plus + minus),
    })
}
