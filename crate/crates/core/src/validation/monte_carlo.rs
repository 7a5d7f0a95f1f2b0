use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{forward_gradient, jvp, reverse_grad, Batch, Graph, GraphBuilder};
use crate::error::{argument, Result};
use crate::fedcore::{
    aggregate, client_train, combine, map_layers_to_clients, ClientData, ClientUpdate, Estimator, LocalConfig,
    LocalOptimizer, PerturbationStream, RoundContext, RoundPlan, CommMode,
};
use crate::model::{Model, ParamStore};
use crate::rng::mix64;
use crate::tensor::{Tensor, TensorMap, TensorMapExt};

use super::{z_score, TheoryReport, Z_TOLERANCE};

/// Per-coordinate running mean and variance (Welford, merged with Chan's rule).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub n: u64,
    pub mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &xi) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = xi - *m;
            *m += d / n;
            *s += d * (xi - *m);
        }
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let d = other.mean[i] - self.mean[i];
            self.mean[i] += d * nb / n;
            self.m2[i] += other.m2[i] + d * d * na * nb / n;
        }
        self.n += other.n;
    }

    /// Unbiased sample variance per coordinate.
    pub fn variance(&self) -> Vec<f64> {
        let denom = self.n.saturating_sub(1).max(1) as f64;
        self.m2.iter().map(|s| s / denom).collect()
    }

    /// Standard error of each mean.
    pub fn std_err(&self) -> Vec<f64> {
        let n = self.n.max(1) as f64;
        self.variance().iter().map(|v| (v / n).sqrt()).collect()
    }
}

const CHUNK: usize = 512;

/// Moments of `sample(i)` for `i` in `0..n`, computed in fixed chunks so the
/// result does not depend on the thread count.
fn mc_moments<F>(n: usize, dim: usize, sample: F) -> Result<Moments>
where
    F: Fn(u64) -> Result<Vec<f64>> + Sync,
{
    let chunks: Vec<Moments> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut m = Moments::new(dim);
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                m.push(&sample(i as u64)?);
            }
            Ok(m)
        })
        .collect::<Result<_>>()?;
    let mut total = Moments::new(dim);
    for c in &chunks {
        total.merge(c);
    }
    Ok(total)
}

/// Adds per-coordinate z-scores of `m` against `truth` and the max-|z| assertion.
fn z_assert(report: &mut TheoryReport, label: &str, m: &Moments, truth: &[f64]) -> f64 {
    let se = m.std_err();
    let mut max_z: f64 = 0.0;
    for i in 0..truth.len() {
        let z = z_score(m.mean[i], truth[i], se[i]);
        max_z = max_z.max(z.abs());
        if truth.len() <= 64 {
            report.stat(format!("{}[{}]", label, i), m.mean[i], Some(se[i]), Some(truth[i]));
        }
    }
    report.stat(format!("{}_max_abs_z", label), max_z, None, None);
    report.stat(
        format!("{}_mean_std_err", label),
        se.iter().sum::<f64>() / se.len().max(1) as f64,
        None,
        None,
    );
    report.assert(
        format!("{}_within_{}se", label, Z_TOLERANCE),
        max_z <= Z_TOLERANCE,
        format!("max |z| ≤ {}", Z_TOLERANCE),
        m.n,
        format!("max |z| = {:.3} over {} coordinates", max_z, truth.len()),
    );
    max_z
}

/// Minimum sample size of the unbiasedness check.
pub const MIN_UNBIASED_SAMPLES: usize = 10_000;

/// Mean of `n` forward gradients (`v ~ N(0, I)`) against the exact gradient.
pub fn check_unbiasedness(graph: &Graph, params: &ParamStore, batch: &Batch, n: usize, seed: u64) -> Result<TheoryReport> {
    if n < MIN_UNBIASED_SAMPLES {
        return Err(argument!("unbiasedness check needs N ≥ {}, got {}", MIN_UNBIASED_SAMPLES, n));
    }
    let truth = reverse_grad(graph, params, batch)?.grads.flatten();
    let like = params.trainable_tensors();
    let stream = PerturbationStream::new(seed, 0, 0);
    let m = mc_moments(n, truth.len(), |i| {
        let v = stream.tangent(i, 0, &like);
        let (loss, j) = jvp(graph, params, &v, batch)?;
        Ok(forward_gradient(j, &v, loss).grads.flatten())
    })?;
    let mut report = TheoryReport::new("unbiasedness", seed);
    report.stat("dimension", truth.len() as f64, None, None);
    z_assert(&mut report, "forward_gradient", &m, &truth);
    Ok(report)
}

/// `f(w) = ⟨a, w⟩` with `a = 1/√d`, so `‖∇f‖ = 1`.
fn linear_probe(d: usize) -> Result<(Graph, ParamStore, Tensor)> {
    let a = Tensor::filled(&[d], 1.0 / (d as f64).sqrt());
    let mut g = GraphBuilder::new();
    let w = g.param("w", &[d]);
    let c = g.constant(a.clone());
    let prod = g.mul(w, c);
    let out = g.sum(prod);
    let mut store = ParamStore::new();
    store.insert("w", Tensor::zeros(&[d]), true)?;
    Ok((g.finish(out)?, store, a))
}

/// `E‖ĝ‖² / ‖∇f‖²` for the mean `ĝ` of `k` forward gradients of a linear loss.
///
/// The estimate runs through the forward-mode engine. It is compared with
/// an independent oracle that draws `v` from a different generator and forms
/// `ĝ` directly. Two closed forms are reported without assertion:
/// `(3d + K − 1)/K` and the Gaussian fourth-moment value `(d + K + 1)/K`
/// (which is `d + 2` at `K = 1`).
pub fn check_second_moment(d: usize, k: usize, n: usize, seed: u64) -> Result<TheoryReport> {
    if d == 0 || k == 0 || n < 2 {
        return Err(argument!("second-moment check needs d ≥ 1, K ≥ 1 and N ≥ 2"));
    }
    let (graph, store, a) = linear_probe(d)?;
    let grad_sq = a.norm_sq();
    let batch = Batch::unit();
    let like = store.trainable_tensors();
    let stream = PerturbationStream::new(seed, 0, 0);
    let engine = mc_moments(n, 1, |i| {
        let vs = stream.tangents(i, k, &like);
        let mut coeffs = Vec::with_capacity(k);
        for v in &vs {
            coeffs.push(jvp(&graph, &store, v, &batch)?.1 / k as f64);
        }
        Ok(vec![combine(&coeffs, &vs)?.norm_sq() / grad_sq])
    })?;
    let oracle = mc_moments(n, 1, |i| {
        let mut rng = StdRng::seed_from_u64(mix64(&[seed, 0x0AC1E, i]));
        let mut g = vec![0.0; d];
        let mut v = vec![0.0; d];
        for _ in 0..k {
            let mut dir = 0.0;
            for (vi, ai) in v.iter_mut().zip(a.data()) {
                let x: f64 = StandardNormal.sample(&mut rng);
                *vi = x;
                dir += x * ai;
            }
            for (gi, vi) in g.iter_mut().zip(&v) {
                *gi += dir * vi / k as f64;
            }
        }
        Ok(vec![g.iter().map(|x| x * x).sum::<f64>() / grad_sq])
    })?;
    let (mc, mc_se) = (engine.mean[0], engine.std_err()[0]);
    let (or, or_se) = (oracle.mean[0], oracle.std_err()[0]);
    let (df, kf) = (d as f64, k as f64);
    let stated = (3.0 * df + kf - 1.0) / kf;
    let gaussian = (df + kf + 1.0) / kf;

    let mut report = TheoryReport::new("second_moment", seed);
    report.stat("d", df, None, None);
    report.stat("k", kf, None, None);
    report.stat("ratio", mc, Some(mc_se), None);
    report.stat("oracle_ratio", or, Some(or_se), None);
    report.stat("factor_3d_plus_k_minus_1_over_k", stated, None, Some(stated));
    report.stat("factor_d_plus_k_plus_1_over_k", gaussian, None, Some(gaussian));
    let combined = (mc_se * mc_se + or_se * or_se).sqrt();
    let z = z_score(mc, or, combined);
    report.assert(
        "agrees_with_oracle",
        z.abs() <= Z_TOLERANCE,
        format!("|z| ≤ {}", Z_TOLERANCE),
        n as u64,
        format!("z = {:.3}", z),
    );
    let matches = |c: f64| z_score(mc, c, mc_se).abs() <= Z_TOLERANCE;
    report.note(format!(
        "(3d+K-1)/K = {} {}; (d+K+1)/K = {} {}",
        stated,
        if matches(stated) { "matches" } else { "does not match" },
        gaussian,
        if matches(gaussian) { "matches" } else { "does not match" },
    ));
    Ok(report)
}

/// Expected server update direction of one homogeneous round.
///
/// Each sample runs one round with a fresh base seed: clients take one SGD
/// step with one forward gradient on their full local data over their
/// cyclically assigned groups, the server averages. `−Δ/η_ℓ` is compared
/// per coordinate with the exact gradient on `global`.
pub fn check_homogeneous_round(
    model: &Model,
    params: &ParamStore,
    clients: &[ClientData],
    global: &Batch,
    lr: f64,
    n: usize,
    seed: u64,
) -> Result<TheoryReport> {
    if !(lr > 0.0) || clients.is_empty() {
        return Err(argument!("need a positive learning rate and at least one client"));
    }
    let truth = reverse_grad(&model.loss, params, global)?.grads.flatten();
    let groups = params.list_trainable_layers();
    let ids: Vec<usize> = clients.iter().map(|c| c.id).collect();
    let mapping = map_layers_to_clients(&groups, &ids);
    let before = params.trainable_tensors();
    let local = LocalConfig {
        lr,
        epochs: 1,
        batch_size: None,
        optimizer: LocalOptimizer::Sgd,
    };
    let m = mc_moments(n, truth.len(), |i| {
        let plan = RoundPlan {
            round: 1,
            base_seed: mix64(&[seed, i]),
            mode: CommMode::PerEpoch,
            clients: ids.clone(),
            mapping: mapping.clone(),
        };
        let ctx = RoundContext {
            master_seed: seed,
            round: 1,
            reference: None,
            iteration_cap: None,
        };
        let updates: Vec<ClientUpdate> = clients
            .iter()
            .map(|c| {
                let stream = PerturbationStream::new(plan.base_seed, 1, c.id as u64);
                client_train(model, params, &plan.groups_of(c.id), &stream, &local, &Estimator::Forward { k: 1 }, c, &ctx)
            })
            .collect::<Result<_>>()?;
        let after: TensorMap = aggregate(&updates, &plan, params)?;
        let mut step = before.clone();
        step.axpy(-1.0, &after)?;
        Ok(step.scaled(1.0 / lr).flatten())
    })?;
    let mut report = TheoryReport::new("homogeneous_round", seed);
    report.stat("clients", clients.len() as f64, None, None);
    report.stat("groups", groups.len() as f64, None, None);
    z_assert(&mut report, "round_direction", &m, &truth);
    Ok(report)
}
