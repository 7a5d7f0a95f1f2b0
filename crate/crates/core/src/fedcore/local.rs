use serde::{Deserialize, Serialize};

use crate::error::{argument, structural, Result};
use crate::model::ParamStore;
use crate::tensor::{Tensor, TensorMap, TensorMapExt};

/// Client-side optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LocalOptimizer {
    Sgd,
    /// Adam with decoupled weight decay (AdamW when `weight_decay > 0`).
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl LocalOptimizer {
    pub fn adam() -> Self {
        LocalOptimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Local training schedule shared by all clients of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalConfig {
    pub lr: f64,
    pub epochs: usize,
    /// `None` means one full-data batch per epoch.
    pub batch_size: Option<usize>,
    pub optimizer: LocalOptimizer,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            epochs: 1,
            batch_size: None,
            optimizer: LocalOptimizer::Sgd,
        }
    }
}

impl LocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(argument!("local learning rate must be finite and nonnegative"));
        }
        if self.epochs == 0 {
            return Err(argument!("local epochs must be at least 1"));
        }
        if self.batch_size == Some(0) {
            return Err(argument!("batch size must be positive"));
        }
        if let LocalOptimizer::Adam {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.optimizer
        {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) || !(weight_decay >= 0.0) {
                return Err(argument!("adam needs β₁, β₂ ∈ [0, 1), eps > 0, weight decay ≥ 0"));
            }
        }
        Ok(())
    }
}

/// Per-client optimizer state; fresh at the start of every round.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOptState {
    optimizer: LocalOptimizer,
    m: TensorMap,
    v: TensorMap,
    t: i32,
}

impl LocalOptState {
    pub fn new(optimizer: LocalOptimizer) -> Self {
        Self {
            optimizer,
            m: TensorMap::new(),
            v: TensorMap::new(),
            t: 0,
        }
    }

    /// Applies one step to the parameters named in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &TensorMap, lr: f64) -> Result<()> {
        self.t += 1;
        for (name, g) in grads {
            let w = store
                .get_mut(name)
                .ok_or_else(|| structural!("gradient for unknown parameter `{}`", name))?;
            w.ensure_same_shape(g, name)?;
            match self.optimizer {
                LocalOptimizer::Sgd => w.axpy(-lr, g)?,
                LocalOptimizer::Adam {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                } => {
                    let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                    let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                    let c1 = 1.0 - beta1.powi(self.t);
                    let c2 = 1.0 - beta2.powi(self.t);
                    let (wd, md, vd) = (w.data_mut(), m.data_mut(), v.data_mut());
                    for (i, &gi) in g.data().iter().enumerate() {
                        md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                        vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                        let m_hat = md[i] / c1;
                        let v_hat = vd[i] / c2;
                        wd[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * wd[i]);
                    }
                }
            }
        }
        Ok(())
    }
}

/// `Σ_k c_k · v_k`, accumulated left to right from zero.
pub fn combine(coeffs: &[f64], tangents: &[TensorMap]) -> Result<TensorMap> {
    if coeffs.len() != tangents.len() || tangents.is_empty() {
        return Err(structural!(
            "{} coefficients for {} perturbations",
            coeffs.len(),
            tangents.len()
        ));
    }
    let mut g = tangents[0].zeros_like();
    for (c, v) in coeffs.iter().zip(tangents) {
        g.axpy(*c, v)?;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(vec![w]), true).unwrap();
        s
    }

    fn grad(g: f64) -> TensorMap {
        let mut m = TensorMap::new();
        m.insert("w".into(), Tensor::from_vec(vec![g]));
        m
    }

    #[test]
    fn sgd_step() {
        let mut s = store(1.0);
        LocalOptState::new(LocalOptimizer::Sgd).step(&mut s, &grad(4.0), 0.25).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[0.0]);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // bias-corrected m̂/√v̂ = g/|g| on the first step
        let mut s = store(1.0);
        LocalOptState::new(LocalOptimizer::adam()).step(&mut s, &grad(3.0), 0.1).unwrap();
        let w = s.get("w").unwrap().data()[0];
        assert!((w - (1.0 - 0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn combine_single_is_exact_scale() {
        let v = vec![grad(0.3)];
        let g = combine(&[7.0], &v).unwrap();
        assert_eq!(g["w"].data()[0], 7.0 * 0.3);
        assert!(combine(&[1.0, 2.0], &v).is_err());
    }
}
