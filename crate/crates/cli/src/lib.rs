//! Experiment runner: configuration, subcommands and result files.

pub mod config;
pub mod suites;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;

use spryfed::accounting::{comm_cost, comp_cost};
use spryfed::data::{bias_coefficients, dirichlet_partition, Partition};
use spryfed::fedcore::{run_federation, write_checkpoint, FederationConfig, FederationSetup, MetricsTrace, RunResult};
use spryfed::model::build_model;
use spryfed::validation::TheoryReport;

pub use config::ExperimentConfig;

/// Exit status for configuration problems.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status for protocol or numerical failures during a run.
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    UnknownSuite(String),
    #[error(transparent)]
    Core(#[from] spryfed::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use spryfed::Error as E;
        match self {
            CliError::Config(_) | CliError::UnknownSuite(_) => EXIT_CONFIG,
            CliError::Core(E::Argument(_) | E::Structural(_)) => EXIT_CONFIG,
            CliError::Core(_) => EXIT_RUNTIME,
            CliError::Io { .. } => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads and parses a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    ExperimentConfig::from_json(&text)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn config_error(e: spryfed::Error) -> CliError {
    CliError::Config(e.to_string())
}

fn partition_of(cfg: &ExperimentConfig, train: &spryfed::data::Dataset) -> Result<Partition, CliError> {
    dirichlet_partition(train, cfg.partition_clients, cfg.partition_alpha, cfg.partition_seed()).map_err(config_error)
}

/// Builds the federation a config describes and checks it before round 0.
pub fn prepare(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<(FederationSetup, FederationConfig), CliError> {
    let (train, eval) = cfg.datasets()?;
    let spec = cfg.model_spec(train.dim(), train.num_classes)?;
    let (model, init) = build_model(&spec).map_err(config_error)?;
    let partition = partition_of(cfg, &train)?;
    let setup = FederationSetup::new(model, init, train, eval, &partition, cfg.partition_test_fraction, cfg.seed)
        .map_err(config_error)?;
    let fc = cfg.federation_config(threads)?;
    fc.validate(&setup).map_err(config_error)?;
    Ok((setup, fc))
}

pub fn trace_csv(trace: &MetricsTrace, cfg: &ExperimentConfig) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    trace.write_csv(&mut buf, Some(&cfg.csv_comment()))?;
    Ok(buf)
}

fn finite_or_null(x: f64) -> serde_json::Value {
    if x.is_finite() {
        json!(x)
    } else {
        serde_json::Value::Null
    }
}

pub fn summary_json(result: &RunResult, cfg: &ExperimentConfig) -> serde_json::Value {
    let rows = &result.trace.rows;
    let best = rows
        .iter()
        .fold(None::<&spryfed::fedcore::MetricsRow>, |b, r| match b {
            Some(b) if b.acc_gen >= r.acc_gen => Some(b),
            _ => Some(r),
        });
    let row = |r: Option<&spryfed::fedcore::MetricsRow>| match r {
        Some(r) => json!({
            "round": r.round,
            "acc_gen": finite_or_null(r.acc_gen),
            "acc_pers": finite_or_null(r.acc_pers),
            "loss": finite_or_null(r.loss),
            "grad_norm_proxy": finite_or_null(r.grad_norm_proxy),
        }),
        None => serde_json::Value::Null,
    };
    json!({
        "schema": config::SCHEMA_VERSION,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "method": cfg.method,
        "rounds": rows.len(),
        "final": row(rows.last()),
        "best": row(best),
        "identity_rounds": result.identity_rounds,
    })
}

/// Paths written by [`cmd_run`].
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub trace: PathBuf,
    pub summary: PathBuf,
    pub checkpoint: PathBuf,
}

/// Runs the federation and writes `trace.csv`, `summary.json` and
/// `checkpoint.bin` into `out`.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path, threads: Option<usize>) -> Result<RunOutputs, CliError> {
    let (setup, fc) = prepare(cfg, threads)?;
    log::info!(
        "running {} for {} rounds over {} clients (config {})",
        cfg.method,
        cfg.rounds,
        setup.clients.len(),
        &cfg.hash()[..12]
    );
    let result = run_federation(&setup, &fc)?;
    create_dir(out)?;
    let outputs = RunOutputs {
        trace: out.join("trace.csv"),
        summary: out.join("summary.json"),
        checkpoint: out.join("checkpoint.bin"),
    };
    write_file(&outputs.trace, &trace_csv(&result.trace, cfg)?)?;
    let mut summary = summary_json(&result, cfg);
    summary["checkpoint"] = json!("checkpoint.bin");
    write_file(&outputs.summary, serde_json::to_string_pretty(&summary).expect("json").as_bytes())?;
    let mut ckpt = Vec::new();
    write_checkpoint(&result.params, &mut ckpt)?;
    write_file(&outputs.checkpoint, &ckpt)?;
    if let Some(last) = result.trace.last() {
        log::info!("round {}: acc_gen {:.4}, loss {:.4}", last.round, last.acc_gen, last.loss);
    }
    Ok(outputs)
}

/// Bias coefficients (unit class concentrations) as CSV.
pub fn bias_csv(p: &Partition, cfg: &ExperimentConfig) -> Result<Vec<u8>, CliError> {
    let classes = p.class_counts.len();
    let bias = bias_coefficients(p, &vec![1.0; classes])?;
    let mut buf = Vec::new();
    writeln!(buf, "# {}", cfg.csv_comment()).expect("vec write");
    let header: Vec<String> = std::iter::once("client".to_string())
        .chain((0..classes).map(|c| format!("class_{}", c)))
        .collect();
    writeln!(buf, "{}", header.join(",")).expect("vec write");
    for (m, row) in bias.alpha_mc.iter().enumerate() {
        let cells: Vec<String> = std::iter::once(m.to_string())
            .chain(row.iter().map(|a| a.to_string()))
            .collect();
        writeln!(buf, "{}", cells.join(",")).expect("vec write");
    }
    Ok(buf)
}

/// Writes `partition.json` and `bias.csv`; returns the partition.
pub fn cmd_partition(cfg: &ExperimentConfig, out: &Path) -> Result<Partition, CliError> {
    let (train, _) = cfg.datasets()?;
    let p = partition_of(cfg, &train)?;
    create_dir(out)?;
    let dump = json!({
        "schema": config::SCHEMA_VERSION,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "partition_seed": cfg.partition_seed(),
        "partition": p,
    });
    write_file(&out.join("partition.json"), serde_json::to_string_pretty(&dump).expect("json").as_bytes())?;
    write_file(&out.join("bias.csv"), &bias_csv(&p, cfg)?)?;
    Ok(p)
}

pub const COST_COLUMNS: [&str; 12] = [
    "method",
    "mode",
    "m",
    "l",
    "w_l",
    "c",
    "v",
    "k",
    "client_to_server",
    "server_to_clients",
    "client_per_iteration",
    "server_per_round",
];

/// Communication and computation costs over the configured grid as CSV.
pub fn cost_csv(cfg: &ExperimentConfig) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    writeln!(buf, "# {}", cfg.csv_comment()).expect("vec write");
    writeln!(buf, "{}", COST_COLUMNS.join(",")).expect("vec write");
    for x in cfg.cost_grid() {
        for method in cfg.cost_methods() {
            let comm = comm_cost(method, &x).map_err(config_error)?;
            let comp = comp_cost(method, &x).map_err(config_error)?;
            let mode = serde_json::to_value(x.mode).expect("mode");
            writeln!(
                buf,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                method,
                mode.as_str().unwrap_or_default(),
                x.m,
                x.l,
                x.w_l,
                x.c,
                x.v,
                x.k,
                comm.client_to_server,
                comm.server_to_clients,
                comp.client_per_iteration,
                comp.server_per_round
            )
            .expect("vec write");
        }
    }
    Ok(buf)
}

pub fn cmd_cost(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf, CliError> {
    create_dir(out)?;
    let path = out.join("cost.csv");
    write_file(&path, &cost_csv(cfg)?)?;
    Ok(path)
}

/// Runs a validation suite and writes `report.json`; returns the bundle.
pub fn cmd_validate(
    cfg: &ExperimentConfig,
    suite: &str,
    out: &Path,
    threads: Option<usize>,
) -> Result<serde_json::Value, CliError> {
    let reports: Vec<TheoryReport> = with_threads(threads, || suites::run_suite(suite, cfg, cfg.validate_samples, threads))?;
    let bundle = json!({
        "schema": config::SCHEMA_VERSION,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "suite": suite,
        "passed": reports.iter().all(TheoryReport::passed),
        "reports": reports,
    });
    create_dir(out)?;
    write_file(&out.join("report.json"), serde_json::to_string_pretty(&bundle).expect("json").as_bytes())?;
    Ok(bundle)
}

/// Runs `f` on a pool of `threads` workers (all cores when `None`).
pub fn with_threads<T: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> Result<T, CliError> + Send,
) -> Result<T, CliError> {
    match threads {
        Some(0) => Err(CliError::Config("threads must be positive".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Config(e.to_string()))?
            .install(f),
        None => f(),
    }
}
