use serde::{Deserialize, Serialize};

use crate::error::{argument, protocol, Result};
use crate::model::ParamStore;
use crate::tensor::{Tensor, TensorMap, TensorMapExt};

use super::client::{ClientUpdate, Payload};
use super::plan::RoundPlan;

/// Builds `w'` from the clients' trained layers.
///
/// Each group is the sample-count-weighted mean over the clients in `updates`
/// that were assigned it. Trainable parameters outside every planned group
/// keep their value from `w_r`.
pub fn aggregate(updates: &[ClientUpdate], plan: &RoundPlan, w_r: &ParamStore) -> Result<TensorMap> {
    let mut out = w_r.trainable_tensors();
    for (group, assigned) in &plan.mapping {
        let contributors: Vec<(&TensorMap, usize)> = updates
            .iter()
            .filter(|u| assigned.contains(&u.client_id))
            .map(|u| match &u.payload {
                Payload::UpdatedLayers { weights, sample_count } => Ok((weights, *sample_count)),
                Payload::Jvp(_) => Err(protocol!(
                    "client {} sent jvp records where layers were expected",
                    u.client_id
                )),
            })
            .collect::<Result<_>>()?;
        let total: usize = contributors.iter().map(|(_, n)| n).sum();
        if contributors.is_empty() || total == 0 {
            return Err(protocol!("no client update covers group `{}`", group));
        }
        let members = &w_r
            .group(group)
            .ok_or_else(|| protocol!("planned group `{}` is not in the model", group))?
            .members;
        for name in members {
            let Some(slot) = out.get_mut(name) else { continue };
            let mut acc = Tensor::zeros(slot.shape());
            for (weights, n) in &contributors {
                let w = weights
                    .get(name)
                    .ok_or_else(|| protocol!("update for group `{}` lacks `{}`", group, name))?;
                acc.axpy(*n as f64 / total as f64, w)?;
            }
            *slot = acc;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServerOptimizer {
    /// `w_{r+1} = w'`.
    FedavgMean,
    Fedadam,
    Fedyogi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServerOptConfig {
    pub optimizer: ServerOptimizer,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
    /// Initial second moment; `None` means `τ²`.
    pub v_init: Option<f64>,
}

impl Default for ServerOptConfig {
    fn default() -> Self {
        Self {
            optimizer: ServerOptimizer::Fedyogi,
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.99,
            tau: 1e-3,
            v_init: None,
        }
    }
}

impl ServerOptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(argument!("server learning rate must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(argument!("server β₁ and β₂ must lie in [0, 1)"));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(argument!("τ must be positive"));
        }
        if let Some(v) = self.v_init {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(argument!("initial second moment must be nonnegative"));
            }
        }
        Ok(())
    }
}

/// Server optimizer moments over the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerOptState {
    pub config: ServerOptConfig,
    pub m: TensorMap,
    pub v: TensorMap,
    pub steps: u64,
}

impl ServerOptState {
    pub fn new(config: ServerOptConfig) -> Self {
        Self {
            config,
            m: TensorMap::new(),
            v: TensorMap::new(),
            steps: 0,
        }
    }

    /// `w_{r+1}` from `w_r` and the aggregate `w'`.
    pub fn server_step(&mut self, w_r: &TensorMap, w_prime: &TensorMap) -> Result<TensorMap> {
        self.steps += 1;
        let c = self.config;
        if c.optimizer == ServerOptimizer::FedavgMean {
            return Ok(w_r
                .iter()
                .map(|(k, w)| (k.clone(), w_prime.get(k).unwrap_or(w).clone()))
                .collect());
        }
        let v0 = c.v_init.unwrap_or(c.tau * c.tau);
        let mut out = TensorMap::new();
        for (name, w) in w_r {
            let delta = match w_prime.get(name) {
                Some(wp) => wp.sub(w)?,
                None => Tensor::zeros(w.shape()),
            };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(w.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::filled(w.shape(), v0));
            let mut next = w.clone();
            let (md, vd, wd) = (m.data_mut(), v.data_mut(), next.data_mut());
            for (i, &d) in delta.data().iter().enumerate() {
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * d;
                let d2 = d * d;
                vd[i] = match c.optimizer {
                    ServerOptimizer::Fedadam => c.beta2 * vd[i] + (1.0 - c.beta2) * d2,
                    _ => vd[i] - (1.0 - c.beta2) * d2 * sign(vd[i] - d2),
                };
                wd[i] += c.lr * md[i] / (vd[i].sqrt() + c.tau);
            }
            out.insert(name.clone(), next);
        }
        Ok(out)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `w_{r+1} − w_r` restricted to the trainable parameters.
pub fn round_delta(before: &TensorMap, after: &TensorMap) -> Result<TensorMap> {
    let mut d = after.clone();
    d.axpy(-1.0, before)?;
    Ok(d)
}
