//! Closed-form communication, computation and memory costs.
//!
//! Counts are in scalars (parameters, multiply-adds or stored values) and
//! computed in integers. Layer counts that do not divide evenly among
//! clients are handled by counting the actual cyclic assignment: a client
//! holds at most `⌈L/M⌉` layers and a layer is shared by as many clients as
//! the assignment gives it.

use serde::{Deserialize, Serialize};

use crate::baselines::MethodKind;
use crate::error::{argument, Result};
use crate::fedcore::{map_layers_to_clients, CommMode};
use crate::model::{ModelSpec, ParamStore};

/// Symbols of the cost tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostInputs {
    /// Participating clients `M`.
    pub m: u64,
    /// Trainable layers `L`.
    pub l: u64,
    /// Parameters per layer `w_ℓ`.
    pub w_l: u64,
    /// Matmul cost of one layer `c`.
    pub c: u64,
    /// Column-wise jvp overhead `v`.
    pub v: u64,
    /// Perturbations per iteration `K`.
    pub k: u64,
    pub mode: CommMode,
}

impl CostInputs {
    pub fn w_g(&self) -> u64 {
        self.w_l * self.l
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.l == 0 || self.w_l == 0 || self.k == 0 {
            return Err(argument!("M, L, w_ℓ and K must be positive"));
        }
        Ok(())
    }

    /// Most layers any one client holds, `max(⌈L/M⌉, 1)`.
    fn layers_per_client(&self) -> u64 {
        self.l.div_ceil(self.m).max(1)
    }

    /// Clients sharing each layer under the cyclic assignment.
    fn sharing(&self) -> Vec<u64> {
        let groups: Vec<String> = (0..self.l).map(|i| i.to_string()).collect();
        let clients: Vec<usize> = (0..self.m as usize).collect();
        map_layers_to_clients(&groups, &clients)
            .values()
            .map(|cs| cs.len() as u64)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommCost {
    /// From each client to the server per round.
    pub client_to_server: u64,
    /// From the server to all clients per round.
    pub server_to_clients: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompCost {
    pub client_per_iteration: u64,
    pub server_per_round: u64,
}

fn is_zero_order(method: MethodKind) -> bool {
    matches!(method, MethodKind::Fedmezo | MethodKind::BafflePlus | MethodKind::FwdllmPlus)
}

pub fn comm_cost(method: MethodKind, x: &CostInputs) -> Result<CommCost> {
    x.validate()?;
    let (w_g, m) = (x.w_g(), x.m);
    let per_iteration = x.mode == CommMode::PerIteration;
    Ok(match method {
        MethodKind::Spry | MethodKind::FedavgSplit => {
            let down = x.w_l * x.l.max(m);
            if per_iteration && method == MethodKind::Spry {
                CommCost {
                    client_to_server: 1,
                    server_to_clients: down + m,
                }
            } else {
                CommCost {
                    client_to_server: x.w_l * x.layers_per_client(),
                    server_to_clients: down,
                }
            }
        }
        MethodKind::Fedfgd if per_iteration => CommCost {
            client_to_server: 1,
            server_to_clients: (w_g + 1) * m,
        },
        _ if is_zero_order(method) && per_iteration => CommCost {
            client_to_server: 1,
            server_to_clients: (w_g + 1) * m,
        },
        _ => CommCost {
            client_to_server: w_g,
            server_to_clients: w_g * m,
        },
    })
}

pub fn comp_cost(method: MethodKind, x: &CostInputs) -> Result<CompCost> {
    x.validate()?;
    let (l, c, w_l, m, k) = (x.l, x.c, x.w_l, x.m, x.k);
    let per_iteration = x.mode == CommMode::PerIteration;
    let aggregate_all = (m - 1) * w_l * l;
    Ok(match method {
        MethodKind::Fedavg | MethodKind::Fedyogi | MethodKind::Fedsgd => CompCost {
            client_per_iteration: 3 * l * c,
            server_per_round: aggregate_all,
        },
        MethodKind::FedavgSplit => CompCost {
            client_per_iteration: 3 * l * c,
            server_per_round: x.sharing().iter().map(|n| (n - 1) * w_l).sum(),
        },
        MethodKind::Fedmezo | MethodKind::BafflePlus | MethodKind::FwdllmPlus => CompCost {
            client_per_iteration: if method == MethodKind::Fedmezo {
                l * (2 * c + 3 * w_l)
            } else {
                k * l * (2 * c + w_l)
            },
            server_per_round: if per_iteration { 2 * m * w_l * l } else { aggregate_all },
        },
        MethodKind::Spry => CompCost {
            client_per_iteration: 2 * x.layers_per_client() * (c + x.v) + w_l * l,
            server_per_round: if per_iteration {
                x.sharing().iter().map(|n| 2 * n * w_l).sum()
            } else {
                x.sharing().iter().map(|n| (n - 1) * w_l).sum()
            },
        },
        MethodKind::Fedfgd => CompCost {
            client_per_iteration: 2 * l * (c + x.v) + w_l * l,
            server_per_round: if per_iteration { 2 * m * w_l * l } else { aggregate_all },
        },
    })
}

/// Which derivative machinery a method runs on its clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientKind {
    Backprop,
    ZeroOrder,
    ForwardAd,
}

impl GradientKind {
    pub fn of(method: MethodKind) -> Self {
        match method {
            MethodKind::Spry | MethodKind::Fedfgd => GradientKind::ForwardAd,
            m if is_zero_order(m) => GradientKind::ZeroOrder,
            _ => GradientKind::Backprop,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryInputs {
    /// Activation scalars per sample of each layer.
    pub activations: Vec<u64>,
    pub batch: u64,
    pub trainable: u64,
    pub total: u64,
    /// Extra optimizer state per trainable scalar (0 for SGD, 2 for Adam).
    pub optimizer_multiplier: u64,
}

impl MemoryInputs {
    /// Inputs for a built model: one activation entry per linear layer.
    pub fn for_model(spec: &ModelSpec, params: &ParamStore, batch: u64, optimizer_multiplier: u64) -> Self {
        Self {
            activations: spec.layer_inputs().into_iter().map(|a| a as u64).collect(),
            batch,
            trainable: params.num_trainable() as u64,
            total: params.num_params() as u64,
            optimizer_multiplier,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub params: u64,
    pub grads_opt: u64,
    pub activations: u64,
    pub peak: u64,
}

/// Scalar-count memory model.
///
/// Backpropagation keeps every layer's activations for the backward sweep.
/// Finite differences keep only the live layer. Forward-mode AD keeps the
/// live layer's primal and tangent side by side.
pub fn memory_model(kind: GradientKind, m: &MemoryInputs) -> Result<MemoryBreakdown> {
    if m.activations.is_empty() || m.activations.contains(&0) {
        return Err(argument!("activation sizes must be positive"));
    }
    let widest = *m.activations.iter().max().expect("nonempty");
    let activations = m.batch
        * match kind {
            GradientKind::Backprop => m.activations.iter().sum(),
            GradientKind::ZeroOrder => widest,
            GradientKind::ForwardAd => 2 * widest,
        };
    let grads_opt = m.trainable * (1 + m.optimizer_multiplier);
    Ok(MemoryBreakdown {
        params: m.total,
        grads_opt,
        activations,
        peak: m.total + grads_opt + activations,
    })
}

/// One line of a cost sweep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub method: MethodKind,
    pub inputs: CostInputs,
    pub comm: CommCost,
    pub comp: CompCost,
}

/// Every method at every grid point, in grid order then method order.
pub fn cost_sweep(methods: &[MethodKind], grid: &[CostInputs]) -> Result<Vec<CostRow>> {
    let mut rows = Vec::with_capacity(methods.len() * grid.len());
    for x in grid {
        for &method in methods {
            rows.push(CostRow {
                method,
                inputs: *x,
                comm: comm_cost(method, x)?,
                comp: comp_cost(method, x)?,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(m: u64, l: u64, w_l: u64, mode: CommMode) -> CostInputs {
        CostInputs {
            m,
            l,
            w_l,
            c: 7,
            v: 2,
            k: 20,
            mode,
        }
    }

    #[test]
    fn spry_table_examples() {
        let x = inputs(10, 20, 100, CommMode::PerEpoch);
        assert_eq!(comm_cost(MethodKind::Spry, &x).unwrap().client_to_server, 200);
        let x = inputs(10, 20, 100, CommMode::PerIteration);
        assert_eq!(comm_cost(MethodKind::Spry, &x).unwrap().server_to_clients, 2010);
        let x = inputs(4, 4, 10, CommMode::PerEpoch);
        assert_eq!(comp_cost(MethodKind::Spry, &x).unwrap().client_per_iteration, 58);
    }

    #[test]
    fn backprop_and_baffle_examples() {
        let x = inputs(4, 4, 10, CommMode::PerEpoch);
        assert_eq!(comp_cost(MethodKind::Fedavg, &x).unwrap().client_per_iteration, 84);
        assert_eq!(comp_cost(MethodKind::BafflePlus, &x).unwrap().client_per_iteration, 1920);
        assert_eq!(comm_cost(MethodKind::Fedavg, &inputs(37, 4, 10, CommMode::PerEpoch)).unwrap().client_to_server, 40);
    }

    #[test]
    fn indivisible_layers_use_ceiling() {
        let x = inputs(2, 5, 10, CommMode::PerEpoch);
        let c = comm_cost(MethodKind::Spry, &x).unwrap();
        assert_eq!(c.client_to_server, 30);
        assert_eq!(c.server_to_clients, 50);
    }

    #[test]
    fn memory_examples() {
        let single = MemoryInputs {
            activations: vec![64],
            batch: 8,
            trainable: 10,
            total: 100,
            optimizer_multiplier: 2,
        };
        let bp = memory_model(GradientKind::Backprop, &single).unwrap();
        let zo = memory_model(GradientKind::ZeroOrder, &single).unwrap();
        assert_eq!(bp.activations, zo.activations);
        assert_eq!(bp.grads_opt, 30);
        assert_eq!(bp.peak, 100 + 30 + 8 * 64);
        let deep = MemoryInputs {
            activations: vec![32; 6],
            ..single
        };
        let bp = memory_model(GradientKind::Backprop, &deep).unwrap();
        let fwd = memory_model(GradientKind::ForwardAd, &deep).unwrap();
        assert_eq!(bp.activations * 2, fwd.activations * 6);
        assert!(memory_model(GradientKind::Backprop, &MemoryInputs { activations: vec![], ..deep }).is_err());
    }
}
