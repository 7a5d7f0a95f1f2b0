use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{argument, Result};
use crate::rng::{mix64, tag, CounterRng};

/// How clients report their local work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommMode {
    /// Clients upload their trained layers once per round.
    #[default]
    PerEpoch,
    /// Clients upload one jvp scalar per perturbation per iteration and the
    /// server replays their updates from the shared seed.
    PerIteration,
}

/// Cyclic assignment of layer groups to clients.
///
/// With `L ≥ M` client `m` receives groups `{i : i mod M = m}`; with `M > L`
/// client `m` receives group `m mod L`, so every group is shared by
/// `⌈M/L⌉` or `⌊M/L⌋` clients. Values are client ids in ascending position.
pub fn map_layers_to_clients(groups: &[String], clients: &[usize]) -> IndexMap<String, Vec<usize>> {
    let mut mapping: IndexMap<String, Vec<usize>> = groups.iter().map(|g| (g.clone(), Vec::new())).collect();
    if groups.is_empty() || clients.is_empty() {
        return mapping;
    }
    if groups.len() >= clients.len() {
        for (i, g) in groups.iter().enumerate() {
            mapping[g].push(clients[i % clients.len()]);
        }
    } else {
        for (m, &c) in clients.iter().enumerate() {
            mapping[&groups[m % groups.len()]].push(c);
        }
    }
    mapping
}

/// Every group to every client.
pub fn map_all_to_all(groups: &[String], clients: &[usize]) -> IndexMap<String, Vec<usize>> {
    groups.iter().map(|g| (g.clone(), clients.to_vec())).collect()
}

/// One round's participants and their layer assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub round: u64,
    pub base_seed: u64,
    pub mode: CommMode,
    /// Participating client ids, ascending.
    pub clients: Vec<usize>,
    /// Group name → client ids training it.
    pub mapping: IndexMap<String, Vec<usize>>,
}

impl RoundPlan {
    /// Groups assigned to `client`, in group order.
    pub fn groups_of(&self, client: usize) -> Vec<String> {
        self.mapping
            .iter()
            .filter(|(_, cs)| cs.contains(&client))
            .map(|(g, _)| g.clone())
            .collect()
    }

    /// Every group has a client and every client has a group.
    pub fn is_covering(&self) -> bool {
        self.mapping.values().all(|cs| !cs.is_empty())
            && self.clients.iter().all(|&c| self.mapping.values().any(|cs| cs.contains(&c)))
    }
}

/// Seed shared by the server and all clients for one round.
pub fn round_seed(master_seed: u64, round: u64) -> u64 {
    mix64(&[master_seed, tag::ROUND_SEED, round])
}

/// `⌈s·n⌉` distinct clients out of `0..n`, ascending.
pub fn sample_clients(n: usize, rate: f64, master_seed: u64, round: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(argument!("no clients to sample from"));
    }
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(argument!("sampling rate must lie in (0, 1], got {}", rate));
    }
    let k = ((rate * n as f64).ceil() as usize).clamp(1, n);
    let mut ids: Vec<usize> = (0..n).collect();
    CounterRng::from_parts(&[master_seed, tag::SAMPLING, round]).shuffle(&mut ids);
    ids.truncate(k);
    ids.sort_unstable();
    Ok(ids)
}
