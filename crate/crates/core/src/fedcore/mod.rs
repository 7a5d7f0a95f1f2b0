//! The federated protocol: cyclic layer assignment, seed-shared
//! perturbations, client training, aggregation and the server optimizer.

mod checkpoint;
mod client;
mod local;
mod plan;
mod run;
mod server;
mod stream;

pub use checkpoint::{load_checkpoint, read_checkpoint, write_checkpoint};
pub use client::{
    client_iteration, client_train, server_reconstruct, train_client, ClientData, ClientOutcome, ClientState,
    ClientUpdate, Estimator, JvpRecord, Payload, RoundContext,
};
pub use local::{combine, LocalConfig, LocalOptState, LocalOptimizer};
pub use plan::{map_all_to_all, map_layers_to_clients, round_seed, sample_clients, CommMode, RoundPlan};
pub use run::{
    run_federation, server_metrics, FederationConfig, FederationSetup, MetricsRow, MetricsTrace, RunResult,
    TRACE_COLUMNS,
};
pub use server::{aggregate, round_delta, ServerOptConfig, ServerOptState, ServerOptimizer};
pub use stream::PerturbationStream;
