use std::sync::Arc;

use crate::autodiff::{jvp, reverse_grad, Batch};
use crate::baselines::{zero_order_step, ZeroOrderRule};
use crate::data::Dataset;
use crate::error::{protocol, structural, Result};
use crate::model::{Model, ParamStore};
use crate::rng::{tag, CounterRng};
use crate::tensor::{Tensor, TensorMap, TensorMapExt};

use super::local::{combine, LocalConfig, LocalOptState};
use super::stream::PerturbationStream;

/// How a client turns a batch into a gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimator {
    /// Mean of `k` forward gradients `jvp_k · v_k`.
    Forward { k: usize },
    /// Exact gradient by backpropagation.
    Reverse,
    ZeroOrder(ZeroOrderRule),
}

/// One client's local data: index lists into a shared dataset.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub id: usize,
    pub source: Arc<Dataset>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClientData {
    /// Shuffled mini-batches of the local train split for one epoch; the
    /// last batch may be short.
    pub fn epoch_batches(&self, batch_size: Option<usize>, master_seed: u64, round: u64, epoch: u64) -> Vec<Vec<usize>> {
        let mut idx = self.train.clone();
        CounterRng::from_parts(&[master_seed, tag::SHUFFLE, round, self.id as u64, epoch]).shuffle(&mut idx);
        let size = batch_size.unwrap_or(idx.len()).max(1);
        idx.chunks(size).map(<[usize]>::to_vec).collect()
    }

    /// Every local iteration of a round, epochs back to back.
    pub fn schedule(&self, local: &LocalConfig, master_seed: u64, round: u64) -> Vec<Vec<usize>> {
        (0..local.epochs as u64)
            .flat_map(|e| self.epoch_batches(local.batch_size, master_seed, round, e))
            .collect()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        self.source.batch(indices)
    }

    pub fn test_batch(&self) -> Result<Option<Batch>> {
        if self.test.is_empty() {
            return Ok(None);
        }
        self.source.batch(&self.test).map(Some)
    }
}

/// What one client reports for one local iteration in per-iteration mode.
#[derive(Debug, Clone, PartialEq)]
pub struct JvpRecord {
    pub iteration: u64,
    /// One jvp per perturbation.
    pub jvp: Vec<f64>,
    /// Loss at the weights before the update.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    UpdatedLayers { weights: TensorMap, sample_count: usize },
    Jvp(Vec<JvpRecord>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub payload: Payload,
}

/// Round-level inputs every client sees.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub master_seed: u64,
    pub round: u64,
    /// Previous round's server update, used by alignment-based selection.
    pub reference: Option<&'a TensorMap>,
    /// Stop after this many local iterations.
    pub iteration_cap: Option<usize>,
}

/// Everything a client produced in one round.
#[derive(Debug, Clone)]
pub struct ClientOutcome {
    pub update: ClientUpdate,
    /// The client's locally trained model.
    pub store: ParamStore,
    /// Population variance of the client's mean gradient estimate.
    pub estimate_variance: f64,
}

/// `snapshot` with exactly `assigned` trainable.
fn assigned_store(snapshot: &ParamStore, assigned: &[String]) -> Result<ParamStore> {
    let store = snapshot.freeze_except(assigned)?;
    if store.num_trainable() == 0 {
        return Err(protocol!("client assigned groups {:?} with nothing to train", assigned));
    }
    Ok(store)
}

/// The shared rule that turns `k` jvps into a step; clients and the server
/// replay both go through here.
fn apply_forward_step(
    store: &mut ParamStore,
    opt: &mut LocalOptState,
    tangents: &[TensorMap],
    jvps: &[f64],
    lr: f64,
) -> Result<TensorMap> {
    let k = jvps.len() as f64;
    let coeffs: Vec<f64> = jvps.iter().map(|j| j / k).collect();
    let g = combine(&coeffs, tangents)?;
    opt.step(store, &g, lr)?;
    Ok(g)
}

/// Local gradient on one batch; returns the estimate and the pre-step loss.
fn local_gradient(
    model: &Model,
    store: &mut ParamStore,
    estimator: &Estimator,
    stream: &PerturbationStream,
    iteration: u64,
    batch: &Batch,
    reference: Option<&TensorMap>,
) -> Result<(TensorMap, Vec<f64>)> {
    match estimator {
        Estimator::Forward { k } => {
            let tangents = stream.tangents(iteration, *k, &store.trainable_tensors());
            let mut jvps = Vec::with_capacity(*k);
            for v in &tangents {
                jvps.push(jvp(&model.loss, store, v, batch)?.1);
            }
            let coeffs: Vec<f64> = jvps.iter().map(|j| j / *k as f64).collect();
            Ok((combine(&coeffs, &tangents)?, jvps))
        }
        Estimator::Reverse => Ok((reverse_grad(&model.loss, store, batch)?.grads, Vec::new())),
        Estimator::ZeroOrder(rule) => {
            let step = zero_order_step(&model.loss, store, stream, iteration, rule, batch, reference)?;
            Ok((step.grad, step.fd))
        }
    }
}

/// Per-epoch local training on the assigned groups.
#[allow(clippy::too_many_arguments)]
pub fn train_client(
    model: &Model,
    snapshot: &ParamStore,
    assigned: &[String],
    stream: &PerturbationStream,
    local: &LocalConfig,
    estimator: &Estimator,
    data: &ClientData,
    ctx: &RoundContext<'_>,
) -> Result<ClientOutcome> {
    if data.train.is_empty() {
        return Err(protocol!("client {} has no local training data", data.id));
    }
    let mut store = assigned_store(snapshot, assigned)?;
    let mut opt = LocalOptState::new(local.optimizer);
    let mut schedule = data.schedule(local, ctx.master_seed, ctx.round);
    if let Some(cap) = ctx.iteration_cap {
        schedule.truncate(cap);
    }
    let mut mean: Option<TensorMap> = None;
    for (it, idx) in schedule.iter().enumerate() {
        let batch = data.batch(idx)?;
        let (g, _) = local_gradient(model, &mut store, estimator, stream, it as u64, &batch, ctx.reference)?;
        opt.step(&mut store, &g, local.lr)?;
        match &mut mean {
            Some(acc) => acc.axpy(1.0, &g)?,
            None => mean = Some(g),
        }
    }
    let estimate_variance = match mean {
        Some(m) => Tensor::from_vec(m.scaled(1.0 / schedule.len() as f64).flatten()).population_variance(),
        None => 0.0,
    };
    let weights = store.trainable_tensors();
    Ok(ClientOutcome {
        update: ClientUpdate {
            client_id: data.id,
            payload: Payload::UpdatedLayers {
                weights,
                sample_count: data.train.len(),
            },
        },
        store,
        estimate_variance,
    })
}

/// [`train_client`] without the diagnostics.
#[allow(clippy::too_many_arguments)]
pub fn client_train(
    model: &Model,
    snapshot: &ParamStore,
    assigned: &[String],
    stream: &PerturbationStream,
    local: &LocalConfig,
    estimator: &Estimator,
    data: &ClientData,
    ctx: &RoundContext<'_>,
) -> Result<ClientUpdate> {
    train_client(model, snapshot, assigned, stream, local, estimator, data, ctx).map(|o| o.update)
}

/// A client's private state in per-iteration mode.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub store: ParamStore,
    opt: LocalOptState,
    lr: f64,
    k: usize,
    next_iteration: u64,
}

impl ClientState {
    pub fn new(snapshot: &ParamStore, assigned: &[String], local: &LocalConfig, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(structural!("need at least one perturbation per iteration"));
        }
        Ok(Self {
            store: assigned_store(snapshot, assigned)?,
            opt: LocalOptState::new(local.optimizer),
            lr: local.lr,
            k,
            next_iteration: 0,
        })
    }

    pub fn iterations_done(&self) -> u64 {
        self.next_iteration
    }
}

/// One forward-gradient iteration: computes the jvps on `batch`, applies the
/// update to the client's mirror and returns what goes on the wire.
pub fn client_iteration(
    model: &Model,
    state: &mut ClientState,
    stream: &PerturbationStream,
    batch: &Batch,
) -> Result<JvpRecord> {
    let iteration = state.next_iteration;
    let tangents = stream.tangents(iteration, state.k, &state.store.trainable_tensors());
    let mut loss = 0.0;
    let mut jvps = Vec::with_capacity(state.k);
    for v in &tangents {
        let (l, j) = jvp(&model.loss, &state.store, v, batch)?;
        loss = l;
        jvps.push(j);
    }
    apply_forward_step(&mut state.store, &mut state.opt, &tangents, &jvps, state.lr)?;
    state.next_iteration += 1;
    Ok(JvpRecord {
        iteration,
        jvp: jvps,
        loss,
    })
}

/// Replays a client's iterations from its jvp records and the shared seed.
///
/// `records` must hold iterations `0..iterations` in order. Returns the
/// client's assigned weights after the replay.
#[allow(clippy::too_many_arguments)]
pub fn server_reconstruct(
    snapshot: &ParamStore,
    assigned: &[String],
    client: usize,
    records: &[JvpRecord],
    stream: &PerturbationStream,
    local: &LocalConfig,
    k: usize,
    iterations: u64,
) -> Result<TensorMap> {
    let mut store = assigned_store(snapshot, assigned)?;
    let mut opt = LocalOptState::new(local.optimizer);
    let like = store.trainable_tensors();
    for it in 0..iterations {
        let rec = records
            .get(it as usize)
            .filter(|r| r.iteration == it)
            .ok_or_else(|| protocol!("missing jvp record for client {} iteration {}", client, it))?;
        if rec.jvp.len() != k {
            return Err(protocol!(
                "client {} iteration {} sent {} jvps, expected {}",
                client,
                it,
                rec.jvp.len(),
                k
            ));
        }
        let tangents = stream.tangents(it, k, &like);
        apply_forward_step(&mut store, &mut opt, &tangents, &rec.jvp, local.lr)?;
    }
    if records.len() as u64 > iterations {
        return Err(protocol!(
            "client {} sent {} records for a {}-iteration round",
            client,
            records.len(),
            iterations
        ));
    }
    Ok(store.trainable_tensors())
}
