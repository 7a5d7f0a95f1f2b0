use serde::{Deserialize, Serialize};

use crate::autodiff::{forward_loss, Batch, Graph};
use crate::error::{argument, Result};
use crate::fedcore::PerturbationStream;
use crate::model::ParamStore;
use crate::tensor::{Tensor, TensorMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroOrderKind {
    /// One central difference per batch.
    Mezo,
    /// Mean of `k` central differences per batch.
    Baffle,
    /// Of `k` central differences, the one best aligned with the previous
    /// round's server update.
    Fwdllm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZeroOrderRule {
    pub kind: ZeroOrderKind,
    pub k: usize,
    pub sigma: f64,
}

impl ZeroOrderRule {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(argument!("zero-order methods need at least one perturbation"));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(argument!("finite-difference step must be positive, got {}", self.sigma));
        }
        Ok(())
    }
}

/// Result of one zero-order estimate on one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroOrderStep {
    /// Mean of `(f(w+σv) + f(w−σv))/2` over the perturbations.
    pub loss: f64,
    /// One finite-difference directional derivative per perturbation.
    pub fd: Vec<f64>,
    /// Index of the kept perturbation for [`ZeroOrderKind::Fwdllm`].
    pub selected: Option<usize>,
    pub grad: TensorMap,
}

/// Estimates the gradient of the trainable parameters of `store` in place.
///
/// For each perturbation the stream is regenerated three times: to add
/// `σv`, to subtract `2σv`, and to add `σv` back while folding `fd · v` into
/// the estimate. Only one tensor of `v` is alive at a time. On return `store`
/// holds the restored weights (equal to the input up to floating-point
/// rounding of the `+σ, −2σ, +σ` sequence).
pub fn zero_order_step(
    graph: &Graph,
    store: &mut ParamStore,
    stream: &PerturbationStream,
    iteration: u64,
    rule: &ZeroOrderRule,
    batch: &Batch,
    reference: Option<&TensorMap>,
) -> Result<ZeroOrderStep> {
    rule.validate()?;
    let names: Vec<String> = store.trainable_names().into_iter().map(String::from).collect();
    let sizes: Vec<usize> = names.iter().map(|n| store.get(n).expect("listed").numel()).collect();
    let mut grad: Vec<Tensor> = names
        .iter()
        .map(|n| Tensor::zeros(store.get(n).expect("listed").shape()))
        .collect();
    let reference: Option<Vec<&Tensor>> = match reference {
        Some(r) if rule.kind == ZeroOrderKind::Fwdllm && rule.k > 1 => {
            let refs: Option<Vec<&Tensor>> = names.iter().map(|n| r.get(n)).collect();
            refs.filter(|rs| rs.iter().any(|t| !t.is_zero()))
        }
        _ => None,
    };

    let shift = |store: &mut ParamStore, k: usize, s: f64| {
        stream.for_each_tensor(iteration, k, &sizes, |p, v| {
            let w = store.get_mut(&names[p]).expect("listed").data_mut();
            for (wi, vi) in w.iter_mut().zip(v) {
                *wi += s * vi;
            }
        });
    };

    let mut fd = Vec::with_capacity(rule.k);
    let mut loss_sum = 0.0;
    let mut alignment = Vec::with_capacity(rule.k);
    for k in 0..rule.k {
        shift(store, k, rule.sigma);
        let plus = forward_loss(graph, store, batch)?;
        shift(store, k, -2.0 * rule.sigma);
        let minus = forward_loss(graph, store, batch)?;
        let d = (plus - minus) / (2.0 * rule.sigma);
        fd.push(d);
        loss_sum += 0.5 * (plus + minus);

        let coeff = match rule.kind {
            ZeroOrderKind::Mezo | ZeroOrderKind::Baffle => d / rule.k as f64,
            ZeroOrderKind::Fwdllm => 0.0,
        };
        let (mut dot, mut nsq) = (0.0, 0.0);
        stream.for_each_tensor(iteration, k, &sizes, |p, v| {
            let w = store.get_mut(&names[p]).expect("listed").data_mut();
            for (wi, vi) in w.iter_mut().zip(v) {
                *wi += rule.sigma * vi;
            }
            if rule.kind == ZeroOrderKind::Fwdllm {
                if let Some(r) = &reference {
                    for (vi, ri) in v.iter().zip(r[p].data()) {
                        dot += vi * ri;
                        nsq += vi * vi;
                    }
                }
            } else {
                for (gi, vi) in grad[p].data_mut().iter_mut().zip(v) {
                    *gi += coeff * vi;
                }
            }
        });
        if reference.is_some() {
            // cosine up to the positive factor 1/‖Δ‖
            alignment.push(if nsq > 0.0 { d.signum() * dot / nsq.sqrt() } else { 0.0 });
        }
    }

    let mut selected = None;
    if rule.kind == ZeroOrderKind::Fwdllm {
        let mut best = 0;
        for (k, a) in alignment.iter().enumerate() {
            if *a > alignment[best] {
                best = k;
            }
        }
        let d = fd[best];
        stream.for_each_tensor(iteration, best, &sizes, |p, v| {
            for (gi, vi) in grad[p].data_mut().iter_mut().zip(v) {
                *gi += d * vi;
            }
        });
        selected = Some(best);
    }

    Ok(ZeroOrderStep {
        loss: loss_sum / rule.k as f64,
        fd,
        selected,
        grad: names.into_iter().zip(grad).collect(),
    })
}
