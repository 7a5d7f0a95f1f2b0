use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{forward_loss, reverse_grad, Batch};
use crate::baselines::MethodConfig;
use crate::data::{train_test_split, Dataset, Partition};
use crate::error::{argument, protocol, Error, Result};
use crate::model::{GroupKind, Model, ParamStore};
use crate::tensor::{TensorMap, TensorMapExt};

use super::client::{
    client_iteration, server_reconstruct, train_client, ClientData, ClientOutcome, ClientState, ClientUpdate, Estimator,
    Payload, RoundContext,
};
use super::local::LocalConfig;
use super::plan::{map_all_to_all, map_layers_to_clients, round_seed, sample_clients, CommMode, RoundPlan};
use super::server::{aggregate, round_delta, ServerOptConfig, ServerOptState};
use super::stream::PerturbationStream;

/// The fixed ingredients of a run: model, initial weights and client data.
#[derive(Debug, Clone)]
pub struct FederationSetup {
    pub model: Model,
    pub init: ParamStore,
    pub clients: Vec<ClientData>,
    /// Union of all client data; the loss column is measured here.
    pub train: Arc<Dataset>,
    /// Held-out set for generalized accuracy and the gradient-norm proxy.
    pub eval: Dataset,
}

impl FederationSetup {
    /// Clients from a partition of `train`, each with a local
    /// `test_fraction` hold-out.
    pub fn new(
        model: Model,
        init: ParamStore,
        train: Dataset,
        eval: Dataset,
        partition: &Partition,
        test_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        partition.verify(&train)?;
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(argument!("local test fraction must lie in [0, 1)"));
        }
        let train = Arc::new(train);
        let clients = partition
            .client_indices
            .iter()
            .enumerate()
            .map(|(id, idx)| {
                let (tr, te) = train_test_split(idx, test_fraction, seed, id as u64);
                ClientData {
                    id,
                    source: Arc::clone(&train),
                    train: tr,
                    test: te,
                }
            })
            .collect();
        Ok(Self {
            model,
            init,
            clients,
            train,
            eval,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub seed: u64,
    pub rounds: usize,
    pub sampling_rate: f64,
    pub mode: CommMode,
    pub method: MethodConfig,
    pub local: LocalConfig,
    pub server: ServerOptConfig,
    /// Also give the classifier group to every participating client.
    pub personalization: bool,
    /// Worker threads for client simulation; `None` uses all cores. Never
    /// affects results.
    #[serde(skip)]
    pub threads: Option<usize>,
}

impl FederationConfig {
    /// A config with the method's customary server optimizer and epochs.
    pub fn for_method(method: MethodConfig) -> Self {
        Self {
            seed: 0,
            rounds: 1,
            sampling_rate: 1.0,
            mode: CommMode::PerEpoch,
            method,
            local: LocalConfig {
                epochs: method.default_epochs(),
                ..LocalConfig::default()
            },
            server: ServerOptConfig {
                optimizer: method.default_server_optimizer(),
                ..ServerOptConfig::default()
            },
            personalization: false,
            threads: None,
        }
    }

    pub fn validate(&self, setup: &FederationSetup) -> Result<()> {
        self.method.validate()?;
        self.local.validate()?;
        self.server.validate()?;
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return Err(argument!("sampling rate must lie in (0, 1], got {}", self.sampling_rate));
        }
        if self.mode == CommMode::PerIteration && !self.method.supports_per_iteration() {
            return Err(argument!(
                "per-iteration communication needs a forward-gradient method, not {}",
                self.method.name()
            ));
        }
        if self.threads == Some(0) {
            return Err(argument!("threads must be positive"));
        }
        if setup.clients.is_empty() {
            return Err(argument!("federation has no clients"));
        }
        if setup.init.list_trainable_layers().is_empty() {
            return Err(argument!("model has no trainable layer groups"));
        }
        if self.personalization && classifier_group(&setup.init).is_none() {
            return Err(argument!("personalization needs a trainable classifier group"));
        }
        Ok(())
    }
}

fn classifier_group(store: &ParamStore) -> Option<String> {
    let trainable = store.list_trainable_layers();
    store
        .groups()
        .iter()
        .find(|g| g.kind == GroupKind::Classifier && trainable.contains(&g.name))
        .map(|g| g.name.clone())
}

/// One metrics row per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub method: String,
    /// Server model on the global held-out set.
    pub acc_gen: f64,
    /// Pooled accuracy of the participants' local models on their local
    /// test splits; NaN when no participant holds test data.
    pub acc_pers: f64,
    /// Server model's mean loss on the union of client data.
    pub loss: f64,
    /// `‖∇f‖²` of the server model on the held-out set.
    pub grad_norm_proxy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTrace {
    pub rows: Vec<MetricsRow>,
}

pub const TRACE_COLUMNS: [&str; 6] = ["round", "method", "acc_gen", "acc_pers", "loss", "grad_norm_proxy"];

impl MetricsTrace {
    /// Writes the header and one line per row, preceded by `# comment` when given.
    pub fn write_csv<W: Write>(&self, mut out: W, comment: Option<&str>) -> Result<()> {
        let io = |e: std::io::Error| argument!("writing trace: {}", e);
        if let Some(c) = comment {
            writeln!(out, "# {}", c).map_err(io)?;
        }
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        let csv_err = |e: csv::Error| argument!("writing trace: {}", e);
        w.write_record(TRACE_COLUMNS).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.round.to_string(),
                r.method.clone(),
                r.acc_gen.to_string(),
                r.acc_pers.to_string(),
                r.loss.to_string(),
                r.grad_norm_proxy.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(io)
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    /// First round whose generalized accuracy reaches `target`.
    pub fn rounds_to_accuracy(&self, target: f64) -> Option<usize> {
        self.rows.iter().find(|r| r.acc_gen >= target).map(|r| r.round)
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub trace: MetricsTrace,
    pub params: ParamStore,
    /// Rounds in which every client was filtered out and nothing changed.
    pub identity_rounds: Vec<usize>,
}

fn bits_equal(a: &TensorMap, b: &TensorMap) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|((ka, ta), (kb, tb))| {
            ka == kb
                && ta.shape() == tb.shape()
                && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

struct RoundEnv<'a> {
    setup: &'a FederationSetup,
    config: &'a FederationConfig,
    plan: &'a RoundPlan,
    snapshot: &'a ParamStore,
    estimator: Estimator,
    ctx: RoundContext<'a>,
    /// Lockstep length in per-iteration mode.
    iterations: u64,
}

fn simulate_client(env: &RoundEnv<'_>, client: usize) -> Result<ClientOutcome> {
    let data = &env.setup.clients[client];
    let assigned = env.plan.groups_of(client);
    let stream = PerturbationStream::new(env.plan.base_seed, env.plan.round, client as u64);
    match env.plan.mode {
        CommMode::PerEpoch => train_client(
            &env.setup.model,
            env.snapshot,
            &assigned,
            &stream,
            &env.config.local,
            &env.estimator,
            data,
            &env.ctx,
        ),
        CommMode::PerIteration => {
            let Estimator::Forward { k } = env.estimator else {
                return Err(argument!("per-iteration mode needs forward gradients"));
            };
            if data.train.is_empty() {
                return Err(protocol!("client {} has no local training data", client));
            }
            let schedule = data.schedule(&env.config.local, env.ctx.master_seed, env.plan.round);
            let mut state = ClientState::new(env.snapshot, &assigned, &env.config.local, k)?;
            let mut records = Vec::with_capacity(env.iterations as usize);
            for idx in schedule.iter().take(env.iterations as usize) {
                let batch = data.batch(idx)?;
                records.push(client_iteration(&env.setup.model, &mut state, &stream, &batch)?);
            }
            let rebuilt = server_reconstruct(
                env.snapshot,
                &assigned,
                client,
                &records,
                &stream,
                &env.config.local,
                k,
                env.iterations,
            )?;
            if !bits_equal(&rebuilt, &state.store.trainable_tensors()) {
                return Err(protocol!(
                    "server replay of client {} diverged from the client's weights in round {}",
                    client,
                    env.plan.round
                ));
            }
            Ok(ClientOutcome {
                update: ClientUpdate {
                    client_id: client,
                    payload: Payload::UpdatedLayers {
                        weights: rebuilt,
                        sample_count: data.train.len(),
                    },
                },
                store: state.store,
                estimate_variance: 0.0,
            })
        }
    }
}

fn personal_accuracy(setup: &FederationSetup, outcomes: &[ClientOutcome]) -> Result<f64> {
    let (mut hits, mut total) = (0.0, 0usize);
    for o in outcomes {
        let data = &setup.clients[o.update.client_id];
        if let Some(batch) = data.test_batch()? {
            hits += setup.model.accuracy(&o.store, &batch)? * batch.len() as f64;
            total += batch.len();
        }
    }
    Ok(if total == 0 { f64::NAN } else { hits / total as f64 })
}

/// Server-side round metrics for the current global model.
pub fn server_metrics(setup: &FederationSetup, params: &ParamStore, eval: &Batch, train: &Batch) -> Result<(f64, f64, f64)> {
    let acc = setup.model.accuracy(params, eval)?;
    let loss = forward_loss(&setup.model.loss, params, train)?;
    let g = reverse_grad(&setup.model.loss, params, eval)?;
    Ok((acc, loss, g.grads.norm_sq()))
}

/// Runs `config.rounds` rounds and records one metrics row per round.
pub fn run_federation(setup: &FederationSetup, config: &FederationConfig) -> Result<RunResult> {
    config.validate(setup)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = config.threads {
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| argument!("cannot start worker pool: {}", e))?;

    let estimator = config.method.estimator();
    let groups = setup.init.list_trainable_layers();
    let classifier = if config.personalization {
        classifier_group(&setup.init)
    } else {
        None
    };
    let eval_batch = setup.eval.full_batch();
    let train_batch = setup.train.full_batch();

    let mut params = setup.init.clone();
    let mut server = ServerOptState::new(config.server);
    let mut reference: Option<TensorMap> = None;
    let mut trace = MetricsTrace::default();
    let mut identity_rounds = Vec::new();

    for r in 1..=config.rounds {
        let round = r as u64;
        let participants = sample_clients(setup.clients.len(), config.sampling_rate, config.seed, round)?;
        let mut mapping = if config.method.splits_layers() {
            map_layers_to_clients(&groups, &participants)
        } else {
            map_all_to_all(&groups, &participants)
        };
        if let Some(c) = &classifier {
            mapping[c] = participants.clone();
        }
        let plan = RoundPlan {
            round,
            base_seed: round_seed(config.seed, round),
            mode: config.mode,
            clients: participants,
            mapping,
        };
        let ctx = RoundContext {
            master_seed: config.seed,
            round,
            reference: reference.as_ref(),
            iteration_cap: config.method.iteration_cap(),
        };
        let iterations = plan
            .clients
            .iter()
            .map(|&c| setup.clients[c].schedule(&config.local, config.seed, round).len())
            .min()
            .unwrap_or(0) as u64;
        let env = RoundEnv {
            setup,
            config,
            plan: &plan,
            snapshot: &params,
            estimator,
            ctx,
            iterations,
        };
        let outcomes: Vec<ClientOutcome> = pool.install(|| {
            plan.clients
                .par_iter()
                .map(|&c| simulate_client(&env, c))
                .collect::<Result<Vec<_>>>()
        })?;

        let included: Vec<ClientUpdate> = outcomes
            .iter()
            .filter(|o| config.method.var_threshold().is_none_or(|t| o.estimate_variance < t))
            .map(|o| o.update.clone())
            .collect();

        let before = params.trainable_tensors();
        if included.is_empty() {
            log::warn!("round {}: every client exceeded the variance threshold; model unchanged", r);
            identity_rounds.push(r);
            reference = None;
        } else {
            let w_prime = aggregate(&included, &plan, &params)?;
            let next = server.server_step(&before, &w_prime)?;
            for (name, t) in &next {
                if !t.is_finite() {
                    return Err(Error::NonFinite(format!("round {}: `{}` diverged", r, name)));
                }
                params.set(name, t.clone())?;
            }
            reference = Some(round_delta(&before, &next)?);
        }

        let (acc_gen, loss, grad_norm_proxy) = server_metrics(setup, &params, &eval_batch, &train_batch)?;
        let acc_pers = personal_accuracy(setup, &outcomes)?;
        log::debug!("round {} {}: acc {:.4} loss {:.6}", r, config.method.name(), acc_gen, loss);
        trace.rows.push(MetricsRow {
            round: r,
            method: config.method.name().to_string(),
            acc_gen,
            acc_pers,
            loss,
            grad_norm_proxy,
        });
    }
    Ok(RunResult {
        trace,
        params,
        identity_rounds,
    })
}
