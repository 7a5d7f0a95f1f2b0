//! Flat, namespaced JSON experiment configuration.
//!
//! Keys are dotted (`local.lr`, `mezo.sigma`); unknown keys are rejected and
//! method-specific keys are only accepted for the method that uses them.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use spryfed::accounting::CostInputs;
use spryfed::autodiff::Activation;
use spryfed::baselines::{MethodConfig, MethodKind};
use spryfed::data::{BlobGenerator, Concentration, Dataset};
use spryfed::fedcore::{CommMode, FederationConfig, LocalConfig, LocalOptimizer, ServerOptConfig, ServerOptimizer};
use spryfed::model::ModelSpec;

use crate::CliError;

/// Column schema version written into every CSV comment line.
pub const SCHEMA_VERSION: u32 = 1;

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Synth,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelArch {
    #[default]
    Logreg,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalOptKind {
    #[default]
    Sgd,
    Adam,
}

mod defaults {
    use spryfed::data::Concentration;

    pub fn rounds() -> usize {
        100
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn n() -> usize {
        1000
    }
    pub fn dim() -> usize {
        32
    }
    pub fn classes() -> usize {
        4
    }
    pub fn margin() -> f64 {
        2.0
    }
    pub fn clients() -> usize {
        50
    }
    pub fn alpha() -> Concentration {
        Concentration::Exact
    }
    pub fn test_fraction() -> f64 {
        0.2
    }
    pub fn local_lr() -> f64 {
        0.05
    }
}

/// Everything one invocation needs; serializes losslessly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub method: MethodKind,
    #[serde(default = "defaults::rounds")]
    pub rounds: usize,
    #[serde(default = "defaults::one")]
    pub sampling_rate: f64,
    #[serde(default)]
    pub mode: CommMode,
    #[serde(default, skip_serializing_if = "is_false")]
    pub personalization: bool,

    #[serde(rename = "dataset.kind", default)]
    pub dataset_kind: DatasetKind,
    #[serde(rename = "dataset.n", default = "defaults::n")]
    pub dataset_n: usize,
    #[serde(rename = "dataset.eval_n", default = "defaults::n")]
    pub dataset_eval_n: usize,
    #[serde(rename = "dataset.dim", default = "defaults::dim")]
    pub dataset_dim: usize,
    #[serde(rename = "dataset.classes", default = "defaults::classes")]
    pub dataset_classes: usize,
    #[serde(rename = "dataset.margin", default = "defaults::margin")]
    pub dataset_margin: f64,
    #[serde(rename = "dataset.path", default, skip_serializing_if = "Option::is_none")]
    pub dataset_path: Option<PathBuf>,
    #[serde(rename = "dataset.eval_path", default, skip_serializing_if = "Option::is_none")]
    pub dataset_eval_path: Option<PathBuf>,

    #[serde(rename = "partition.clients", default = "defaults::clients")]
    pub partition_clients: usize,
    #[serde(rename = "partition.alpha", default = "defaults::alpha")]
    pub partition_alpha: Concentration,
    #[serde(rename = "partition.seed", default, skip_serializing_if = "Option::is_none")]
    pub partition_seed: Option<u64>,
    #[serde(rename = "partition.test_fraction", default = "defaults::test_fraction")]
    pub partition_test_fraction: f64,

    #[serde(rename = "model.arch", default)]
    pub model_arch: ModelArch,
    #[serde(rename = "model.hidden", default, skip_serializing_if = "Vec::is_empty")]
    pub model_hidden: Vec<usize>,
    #[serde(rename = "model.activation", default, skip_serializing_if = "Option::is_none")]
    pub model_activation: Option<Activation>,
    #[serde(rename = "model.lora_rank", default, skip_serializing_if = "Option::is_none")]
    pub model_lora_rank: Option<usize>,
    #[serde(rename = "model.lora_alpha", default, skip_serializing_if = "Option::is_none")]
    pub model_lora_alpha: Option<f64>,
    #[serde(rename = "model.init_seed", default, skip_serializing_if = "Option::is_none")]
    pub model_init_seed: Option<u64>,

    #[serde(rename = "local.lr", default = "defaults::local_lr")]
    pub local_lr: f64,
    #[serde(rename = "local.epochs", default, skip_serializing_if = "Option::is_none")]
    pub local_epochs: Option<usize>,
    #[serde(rename = "local.batch_size", default, skip_serializing_if = "Option::is_none")]
    pub local_batch_size: Option<usize>,
    #[serde(rename = "local.optimizer", default)]
    pub local_optimizer: LocalOptKind,
    #[serde(rename = "local.weight_decay", default, skip_serializing_if = "Option::is_none")]
    pub local_weight_decay: Option<f64>,

    #[serde(rename = "server.optimizer", default, skip_serializing_if = "Option::is_none")]
    pub server_optimizer: Option<ServerOptimizer>,
    #[serde(rename = "server.lr", default, skip_serializing_if = "Option::is_none")]
    pub server_lr: Option<f64>,
    #[serde(rename = "server.beta1", default, skip_serializing_if = "Option::is_none")]
    pub server_beta1: Option<f64>,
    #[serde(rename = "server.beta2", default, skip_serializing_if = "Option::is_none")]
    pub server_beta2: Option<f64>,
    #[serde(rename = "server.tau", default, skip_serializing_if = "Option::is_none")]
    pub server_tau: Option<f64>,
    #[serde(rename = "server.v_init", default, skip_serializing_if = "Option::is_none")]
    pub server_v_init: Option<f64>,

    #[serde(rename = "spry.k", default, skip_serializing_if = "Option::is_none")]
    pub spry_k: Option<usize>,
    #[serde(rename = "fedfgd.k", default, skip_serializing_if = "Option::is_none")]
    pub fedfgd_k: Option<usize>,
    #[serde(rename = "mezo.sigma", default, skip_serializing_if = "Option::is_none")]
    pub mezo_sigma: Option<f64>,
    #[serde(rename = "baffle.k", default, skip_serializing_if = "Option::is_none")]
    pub baffle_k: Option<usize>,
    #[serde(rename = "baffle.sigma", default, skip_serializing_if = "Option::is_none")]
    pub baffle_sigma: Option<f64>,
    #[serde(rename = "fwdllm.k", default, skip_serializing_if = "Option::is_none")]
    pub fwdllm_k: Option<usize>,
    #[serde(rename = "fwdllm.sigma", default, skip_serializing_if = "Option::is_none")]
    pub fwdllm_sigma: Option<f64>,
    #[serde(rename = "fwdllm.var_threshold", default, skip_serializing_if = "Option::is_none")]
    pub fwdllm_var_threshold: Option<f64>,

    #[serde(rename = "cost.m", default, skip_serializing_if = "Vec::is_empty")]
    pub cost_m: Vec<u64>,
    #[serde(rename = "cost.l", default, skip_serializing_if = "Vec::is_empty")]
    pub cost_l: Vec<u64>,
    #[serde(rename = "cost.w_l", default, skip_serializing_if = "Vec::is_empty")]
    pub cost_w_l: Vec<u64>,
    #[serde(rename = "cost.k", default, skip_serializing_if = "Vec::is_empty")]
    pub cost_k: Vec<u64>,
    #[serde(rename = "cost.c", default, skip_serializing_if = "Option::is_none")]
    pub cost_c: Option<u64>,
    #[serde(rename = "cost.v", default, skip_serializing_if = "Option::is_none")]
    pub cost_v: Option<u64>,
    #[serde(rename = "cost.methods", default, skip_serializing_if = "Vec::is_empty")]
    pub cost_methods: Vec<MethodKind>,
    #[serde(rename = "cost.modes", default, skip_serializing_if = "Vec::is_empty")]
    pub cost_modes: Vec<CommMode>,

    #[serde(rename = "validate.suite", default, skip_serializing_if = "Option::is_none")]
    pub validate_suite: Option<String>,
    #[serde(rename = "validate.samples", default, skip_serializing_if = "Option::is_none")]
    pub validate_samples: Option<usize>,
}

/// Every method-specific key with the method that owns it.
const METHOD_KEYS: [(&str, MethodKind); 8] = [
    ("spry.k", MethodKind::Spry),
    ("fedfgd.k", MethodKind::Fedfgd),
    ("mezo.sigma", MethodKind::Fedmezo),
    ("baffle.k", MethodKind::BafflePlus),
    ("baffle.sigma", MethodKind::BafflePlus),
    ("fwdllm.k", MethodKind::FwdllmPlus),
    ("fwdllm.sigma", MethodKind::FwdllmPlus),
    ("fwdllm.var_threshold", MethodKind::FwdllmPlus),
];

impl ExperimentConfig {
    /// A config with every default and the given method.
    pub fn new(method: MethodKind) -> Self {
        serde_json::from_value(serde_json::json!({ "method": method }))
            .expect("defaults always deserialize")
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.check_method_keys()?;
        Ok(cfg)
    }

    fn present_method_keys(&self) -> Vec<&'static str> {
        let present = [
            self.spry_k.is_some(),
            self.fedfgd_k.is_some(),
            self.mezo_sigma.is_some(),
            self.baffle_k.is_some(),
            self.baffle_sigma.is_some(),
            self.fwdllm_k.is_some(),
            self.fwdllm_sigma.is_some(),
            self.fwdllm_var_threshold.is_some(),
        ];
        METHOD_KEYS
            .iter()
            .zip(present)
            .filter(|(_, p)| *p)
            .map(|((k, _), _)| *k)
            .collect()
    }

    fn check_method_keys(&self) -> Result<(), CliError> {
        for key in self.present_method_keys() {
            let owner = METHOD_KEYS.iter().find(|(k, _)| *k == key).map(|(_, m)| *m);
            if owner != Some(self.method) {
                return Err(CliError::Config(format!(
                    "key `{}` does not apply to method `{}`",
                    key, self.method
                )));
            }
        }
        Ok(())
    }

    /// Canonical bytes: the serialized config, keys in declaration order.
    pub fn canonical(&self) -> String {
        serde_json::to_string_pretty(self).expect("config always serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// First line of every CSV this config produces.
    pub fn csv_comment(&self) -> String {
        format!("spryfed schema={} config_hash={} seed={}", SCHEMA_VERSION, self.hash(), self.seed)
    }

    pub fn method_config(&self) -> Result<MethodConfig, CliError> {
        self.check_method_keys()?;
        let d = MethodConfig::default_for(self.method);
        let cfg = match d {
            MethodConfig::Spry { k } => MethodConfig::Spry { k: self.spry_k.unwrap_or(k) },
            MethodConfig::Fedfgd { k } => MethodConfig::Fedfgd { k: self.fedfgd_k.unwrap_or(k) },
            MethodConfig::Fedmezo { sigma } => MethodConfig::Fedmezo {
                sigma: self.mezo_sigma.unwrap_or(sigma),
            },
            MethodConfig::BafflePlus { k, sigma } => MethodConfig::BafflePlus {
                k: self.baffle_k.unwrap_or(k),
                sigma: self.baffle_sigma.unwrap_or(sigma),
            },
            MethodConfig::FwdllmPlus { k, sigma, .. } => MethodConfig::FwdllmPlus {
                k: self.fwdllm_k.unwrap_or(k),
                sigma: self.fwdllm_sigma.unwrap_or(sigma),
                var_threshold: self.fwdllm_var_threshold,
            },
            other => other,
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn partition_seed(&self) -> u64 {
        self.partition_seed.unwrap_or(self.seed)
    }

    pub fn model_spec(&self, input_dim: usize, num_classes: usize) -> Result<ModelSpec, CliError> {
        let init_seed = self.model_init_seed.unwrap_or(self.seed);
        let mut spec = match self.model_arch {
            ModelArch::Logreg => {
                if !self.model_hidden.is_empty() {
                    return Err(CliError::Config("key `model.hidden` does not apply to model.arch `logreg`".into()));
                }
                ModelSpec::logreg(input_dim, num_classes, init_seed)
            }
            ModelArch::Mlp => {
                if self.model_hidden.is_empty() {
                    return Err(CliError::Config("model.arch `mlp` needs a nonempty `model.hidden`".into()));
                }
                let widths: Vec<usize> = std::iter::once(input_dim).chain(self.model_hidden.iter().copied()).collect();
                ModelSpec::mlp(&widths, num_classes, init_seed)
            }
        };
        if let Some(a) = self.model_activation {
            spec = spec.with_activation(a);
        }
        match (self.model_lora_rank, self.model_lora_alpha) {
            (Some(r), a) => spec = spec.with_lora(r, a.unwrap_or(r as f64)),
            (None, Some(_)) => return Err(CliError::Config("key `model.lora_alpha` needs `model.lora_rank`".into())),
            (None, None) => {}
        }
        spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(spec)
    }

    /// Train and held-out data.
    pub fn datasets(&self) -> Result<(Dataset, Dataset), CliError> {
        match self.dataset_kind {
            DatasetKind::Synth => {
                let gen = BlobGenerator::new(self.dataset_dim, self.dataset_classes, self.dataset_margin, self.seed)
                    .map_err(|e| CliError::Config(e.to_string()))?;
                let train = gen.sample(self.dataset_n, 0).map_err(|e| CliError::Config(e.to_string()))?;
                let eval = gen.sample(self.dataset_eval_n, 1).map_err(|e| CliError::Config(e.to_string()))?;
                Ok((train, eval))
            }
            DatasetKind::Csv => {
                let (Some(train), Some(eval)) = (&self.dataset_path, &self.dataset_eval_path) else {
                    return Err(CliError::Config(
                        "dataset.kind `csv` needs `dataset.path` and `dataset.eval_path`".into(),
                    ));
                };
                let read = |p: &PathBuf, c: Option<usize>| -> Result<Dataset, CliError> {
                    let f = std::fs::File::open(p).map_err(|e| CliError::Config(format!("{}: {}", p.display(), e)))?;
                    Dataset::from_csv(f, c).map_err(|e| CliError::Config(format!("{}: {}", p.display(), e)))
                };
                let train = read(train, None)?;
                let eval = read(eval, Some(train.num_classes))?;
                Ok((train, eval))
            }
        }
    }

    pub fn federation_config(&self, threads: Option<usize>) -> Result<FederationConfig, CliError> {
        let method = self.method_config()?;
        let mut fc = FederationConfig::for_method(method);
        fc.seed = self.seed;
        fc.rounds = self.rounds;
        fc.sampling_rate = self.sampling_rate;
        fc.mode = self.mode;
        fc.personalization = self.personalization;
        fc.threads = threads;
        fc.local = LocalConfig {
            lr: self.local_lr,
            epochs: self.local_epochs.unwrap_or(method.default_epochs()),
            batch_size: self.local_batch_size,
            optimizer: match self.local_optimizer {
                LocalOptKind::Sgd => {
                    if self.local_weight_decay.is_some() {
                        return Err(CliError::Config("key `local.weight_decay` needs local.optimizer `adam`".into()));
                    }
                    LocalOptimizer::Sgd
                }
                LocalOptKind::Adam => match (LocalOptimizer::adam(), self.local_weight_decay) {
                    (LocalOptimizer::Adam { beta1, beta2, eps, .. }, Some(wd)) => LocalOptimizer::Adam {
                        beta1,
                        beta2,
                        eps,
                        weight_decay: wd,
                    },
                    (adam, _) => adam,
                },
            },
        };
        let d = ServerOptConfig::default();
        fc.server = ServerOptConfig {
            optimizer: self.server_optimizer.unwrap_or(method.default_server_optimizer()),
            lr: self.server_lr.unwrap_or(d.lr),
            beta1: self.server_beta1.unwrap_or(d.beta1),
            beta2: self.server_beta2.unwrap_or(d.beta2),
            tau: self.server_tau.unwrap_or(d.tau),
            v_init: self.server_v_init.or(d.v_init),
        };
        Ok(fc)
    }

    /// The `(M, L, w_ℓ, K)` grid with both modes unless restricted.
    pub fn cost_grid(&self) -> Vec<CostInputs> {
        let or = |v: &Vec<u64>, d: &[u64]| if v.is_empty() { d.to_vec() } else { v.clone() };
        let ms = or(&self.cost_m, &[1, 2, 4, 8, 16, 32]);
        let ls = or(&self.cost_l, &[1, 2, 4, 8, 16, 32]);
        let ws = or(&self.cost_w_l, &[100]);
        let ks = or(&self.cost_k, &[1]);
        let modes = if self.cost_modes.is_empty() {
            vec![CommMode::PerEpoch, CommMode::PerIteration]
        } else {
            self.cost_modes.clone()
        };
        let mut grid = Vec::new();
        for &mode in &modes {
            for &m in &ms {
                for &l in &ls {
                    for &w_l in &ws {
                        for &k in &ks {
                            grid.push(CostInputs {
                                m,
                                l,
                                w_l,
                                c: self.cost_c.unwrap_or(w_l),
                                v: self.cost_v.unwrap_or(1),
                                k,
                                mode,
                            });
                        }
                    }
                }
            }
        }
        grid
    }

    pub fn cost_methods(&self) -> Vec<MethodKind> {
        if self.cost_methods.is_empty() {
            MethodKind::ALL.to_vec()
        } else {
            self.cost_methods.clone()
        }
    }
}
