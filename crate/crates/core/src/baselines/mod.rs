//! The method zoo: forward-gradient, backpropagation and zero-order
//! federated trainers, all driven by the same round loop.

mod zero_order;

pub use zero_order::{zero_order_step, ZeroOrderKind, ZeroOrderRule, ZeroOrderStep};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{argument, Error, Result};
use crate::fedcore::{run_federation, Estimator, FederationConfig, FederationSetup, RunResult, ServerOptimizer};

/// Method names as they appear in configs and traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Spry,
    Fedavg,
    Fedsgd,
    Fedyogi,
    Fedmezo,
    BafflePlus,
    FwdllmPlus,
    FedavgSplit,
    Fedfgd,
}

impl MethodKind {
    pub const ALL: [MethodKind; 9] = [
        MethodKind::Spry,
        MethodKind::Fedavg,
        MethodKind::Fedsgd,
        MethodKind::Fedyogi,
        MethodKind::Fedmezo,
        MethodKind::BafflePlus,
        MethodKind::FwdllmPlus,
        MethodKind::FedavgSplit,
        MethodKind::Fedfgd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::Spry => "spry",
            MethodKind::Fedavg => "fedavg",
            MethodKind::Fedsgd => "fedsgd",
            MethodKind::Fedyogi => "fedyogi",
            MethodKind::Fedmezo => "fedmezo",
            MethodKind::BafflePlus => "baffle_plus",
            MethodKind::FwdllmPlus => "fwdllm_plus",
            MethodKind::FedavgSplit => "fedavg_split",
            MethodKind::Fedfgd => "fedfgd",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| argument!("unknown method `{}`", s))
    }
}

/// A method together with exactly the parameters it uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodConfig {
    Spry { k: usize },
    Fedavg,
    Fedsgd,
    Fedyogi,
    Fedmezo { sigma: f64 },
    BafflePlus { k: usize, sigma: f64 },
    /// `var_threshold: None` disables the variance filter.
    FwdllmPlus { k: usize, sigma: f64, var_threshold: Option<f64> },
    FedavgSplit,
    Fedfgd { k: usize },
}

impl MethodConfig {
    /// The method with its customary parameters.
    pub fn default_for(kind: MethodKind) -> Self {
        match kind {
            MethodKind::Spry => MethodConfig::Spry { k: 1 },
            MethodKind::Fedavg => MethodConfig::Fedavg,
            MethodKind::Fedsgd => MethodConfig::Fedsgd,
            MethodKind::Fedyogi => MethodConfig::Fedyogi,
            MethodKind::Fedmezo => MethodConfig::Fedmezo { sigma: 1e-3 },
            MethodKind::BafflePlus => MethodConfig::BafflePlus { k: 20, sigma: 1e-4 },
            MethodKind::FwdllmPlus => MethodConfig::FwdllmPlus {
                k: 10,
                sigma: 1e-2,
                var_threshold: None,
            },
            MethodKind::FedavgSplit => MethodConfig::FedavgSplit,
            MethodKind::Fedfgd => MethodConfig::Fedfgd { k: 1 },
        }
    }

    pub fn kind(&self) -> MethodKind {
        match self {
            MethodConfig::Spry { .. } => MethodKind::Spry,
            MethodConfig::Fedavg => MethodKind::Fedavg,
            MethodConfig::Fedsgd => MethodKind::Fedsgd,
            MethodConfig::Fedyogi => MethodKind::Fedyogi,
            MethodConfig::Fedmezo { .. } => MethodKind::Fedmezo,
            MethodConfig::BafflePlus { .. } => MethodKind::BafflePlus,
            MethodConfig::FwdllmPlus { .. } => MethodKind::FwdllmPlus,
            MethodConfig::FedavgSplit => MethodKind::FedavgSplit,
            MethodConfig::Fedfgd { .. } => MethodKind::Fedfgd,
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind().as_str()
    }

    pub fn estimator(&self) -> Estimator {
        match *self {
            MethodConfig::Spry { k } | MethodConfig::Fedfgd { k } => Estimator::Forward { k },
            MethodConfig::Fedavg | MethodConfig::Fedsgd | MethodConfig::Fedyogi | MethodConfig::FedavgSplit => {
                Estimator::Reverse
            }
            MethodConfig::Fedmezo { sigma } => Estimator::ZeroOrder(ZeroOrderRule {
                kind: ZeroOrderKind::Mezo,
                k: 1,
                sigma,
            }),
            MethodConfig::BafflePlus { k, sigma } => Estimator::ZeroOrder(ZeroOrderRule {
                kind: ZeroOrderKind::Baffle,
                k,
                sigma,
            }),
            MethodConfig::FwdllmPlus { k, sigma, .. } => Estimator::ZeroOrder(ZeroOrderRule {
                kind: ZeroOrderKind::Fwdllm,
                k,
                sigma,
            }),
        }
    }

    /// Whether trainable groups are split cyclically across clients.
    pub fn splits_layers(&self) -> bool {
        matches!(self, MethodConfig::Spry { .. } | MethodConfig::FedavgSplit)
    }

    pub fn default_server_optimizer(&self) -> ServerOptimizer {
        match self {
            MethodConfig::Fedavg | MethodConfig::Fedsgd | MethodConfig::FedavgSplit => ServerOptimizer::FedavgMean,
            _ => ServerOptimizer::Fedyogi,
        }
    }

    pub fn default_epochs(&self) -> usize {
        match self {
            MethodConfig::Fedmezo { .. } => 3,
            _ => 1,
        }
    }

    /// Local iterations per round, when the method fixes it.
    pub fn iteration_cap(&self) -> Option<usize> {
        match self {
            MethodConfig::Fedsgd => Some(1),
            _ => None,
        }
    }

    pub fn supports_per_iteration(&self) -> bool {
        matches!(self.estimator(), Estimator::Forward { .. })
    }

    pub fn var_threshold(&self) -> Option<f64> {
        match self {
            MethodConfig::FwdllmPlus { var_threshold, .. } => *var_threshold,
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            MethodConfig::Spry { k } | MethodConfig::Fedfgd { k } if k == 0 => {
                Err(argument!("{}: k must be at least 1", self.name()))
            }
            MethodConfig::FwdllmPlus {
                var_threshold: Some(t), ..
            } if !(t > 0.0) => Err(argument!("fwdllm_plus: var_threshold must be positive, got {}", t)),
            _ => match self.estimator() {
                Estimator::ZeroOrder(rule) => rule.validate().map_err(|e| argument!("{}: {}", self.name(), e)),
                _ => Ok(()),
            },
        }
    }
}

fn run_as(setup: &FederationSetup, config: &FederationConfig, method: MethodConfig) -> Result<RunResult> {
    let mut cfg = config.clone();
    cfg.method = method;
    cfg.server.optimizer = method.default_server_optimizer();
    run_federation(setup, &cfg)
}

/// Backpropagation, all groups on every client, plain averaging.
pub fn run_fedavg(setup: &FederationSetup, config: &FederationConfig) -> Result<RunResult> {
    run_as(setup, config, MethodConfig::Fedavg)
}

/// Backpropagation with the adaptive server step.
pub fn run_fedyogi(setup: &FederationSetup, config: &FederationConfig) -> Result<RunResult> {
    run_as(setup, config, MethodConfig::Fedyogi)
}

/// One backpropagation step per client per round, plain averaging.
pub fn run_fedsgd(setup: &FederationSetup, config: &FederationConfig) -> Result<RunResult> {
    run_as(setup, config, MethodConfig::Fedsgd)
}

pub fn run_fedmezo(setup: &FederationSetup, config: &FederationConfig, sigma: f64) -> Result<RunResult> {
    run_as(setup, config, MethodConfig::Fedmezo { sigma })
}

pub fn run_baffle_plus(setup: &FederationSetup, config: &FederationConfig, k: usize, sigma: f64) -> Result<RunResult> {
    run_as(setup, config, MethodConfig::BafflePlus { k, sigma })
}

pub fn run_fwdllm_plus(
    setup: &FederationSetup,
    config: &FederationConfig,
    k: usize,
    sigma: f64,
    var_threshold: Option<f64>,
) -> Result<RunResult> {
    run_as(
        setup,
        config,
        MethodConfig::FwdllmPlus {
            k,
            sigma,
            var_threshold,
        },
    )
}

/// Backpropagation with cyclic layer splitting.
pub fn run_fedavg_split(setup: &FederationSetup, config: &FederationConfig) -> Result<RunResult> {
    run_as(setup, config, MethodConfig::FedavgSplit)
}

/// Forward gradients over all trainable groups on every client.
pub fn run_fedfgd(setup: &FederationSetup, config: &FederationConfig, k: usize) -> Result<RunResult> {
    run_as(setup, config, MethodConfig::Fedfgd { k })
}

pub fn run_spry(setup: &FederationSetup, config: &FederationConfig, k: usize) -> Result<RunResult> {
    run_as(setup, config, MethodConfig::Spry { k })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for m in MethodKind::ALL {
            assert_eq!(m.as_str().parse::<MethodKind>().unwrap(), m);
            let cfg = MethodConfig::default_for(m);
            assert_eq!(cfg.kind(), m);
            cfg.validate().unwrap();
            let json = serde_json::to_string(&cfg).unwrap();
            assert_eq!(serde_json::from_str::<MethodConfig>(&json).unwrap(), cfg);
        }
        assert!("fedprox".parse::<MethodKind>().is_err());
    }

    #[test]
    fn params_present_iff_used() {
        assert!(serde_json::from_str::<MethodConfig>(r#"{"method":"spry","k":1,"sigma":0.1}"#).is_err());
        assert!(serde_json::from_str::<MethodConfig>(r#"{"method":"fedmezo"}"#).is_err());
        assert!(MethodConfig::Spry { k: 0 }.validate().is_err());
        assert!(MethodConfig::Fedmezo { sigma: 0.0 }.validate().is_err());
    }
}
