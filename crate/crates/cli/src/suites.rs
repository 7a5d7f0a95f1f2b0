//! Named validation workloads, shared by `validate` and the acceptance tests.

use spryfed::autodiff::Batch;
use spryfed::data::{dirichlet_partition, synth_classification, BlobGenerator, Concentration};
use spryfed::fedcore::ClientData;
use spryfed::model::{build_model, ModelSpec};
use spryfed::validation::{
    bias_sweep, check_homogeneous_round, check_second_moment, check_unbiasedness, convergence_trend, BiasSweepConfig,
    BiasSweepPoint, TheoryReport,
};

use crate::config::ExperimentConfig;
use crate::{prepare, CliError};

pub const SUITES: [&str; 5] = [
    "unbiasedness",
    "second_moment",
    "homogeneous_round",
    "bias_sweep",
    "convergence_trend",
];

/// Forward-gradient mean against the exact gradient on a 10-parameter
/// logistic regression.
pub fn unbiasedness(seed: u64, samples: usize) -> Result<TheoryReport, CliError> {
    let (model, params) = build_model(&ModelSpec::logreg(4, 2, seed))?;
    let data = synth_classification(32, 4, 2, 1.0, seed)?;
    Ok(check_unbiasedness(&model.loss, &params, &data.full_batch(), samples, seed)?)
}

/// `(d, K)` points of the second-moment report.
pub const SECOND_MOMENT_GRID: [(usize, usize); 5] = [(1, 1), (5, 1), (5, 10), (20, 1), (20, 10)];

/// Second-moment ratios over [`SECOND_MOMENT_GRID`], one report.
///
/// At `d = 1, K = 1` the ratio must also be 3 within 0.1 (the common value
/// of both closed forms).
pub fn second_moment(seed: u64, samples: usize) -> Result<TheoryReport, CliError> {
    let mut out = TheoryReport::new("second_moment", seed);
    for (d, k) in SECOND_MOMENT_GRID {
        let r = check_second_moment(d, k, samples, seed)?;
        let tag = format!("d={},k={}", d, k);
        for s in r.statistics {
            out.stat(format!("{}:{}", tag, s.name), s.value, s.std_err, s.predicted);
        }
        for a in r.assertions {
            out.assert(format!("{}:{}", tag, a.name), a.passed, a.tolerance, a.sample_size, a.detail);
        }
        for n in r.notes {
            out.note(format!("{}: {}", tag, n));
        }
        if (d, k) == (1, 1) {
            let ratio = out.value(&format!("{}:ratio", tag)).unwrap_or(f64::NAN);
            out.assert(
                "d=1,k=1:ratio_is_3",
                (ratio - 3.0).abs() <= 0.1,
                "|ratio − 3| ≤ 0.1",
                samples as u64,
                format!("ratio = {:.4}", ratio),
            );
        }
    }
    Ok(out)
}

/// One split round on identical clients: MLP `[4, 3, 3]`, 3 classes
/// (39 parameters), six clients holding copies of the same 12 samples.
pub fn homogeneous_round(seed: u64, samples: usize) -> Result<TheoryReport, CliError> {
    let (model, params) = build_model(&ModelSpec::mlp(&[4, 3, 3], 3, seed))?;
    let base = synth_classification(12, 4, 3, 1.0, seed)?;
    let clients_n = 6;
    let data = std::sync::Arc::new(base.tiled(clients_n)?);
    let p = dirichlet_partition(&data, clients_n, Concentration::Exact, seed)?;
    let clients: Vec<ClientData> = p
        .client_indices
        .iter()
        .enumerate()
        .map(|(id, idx)| ClientData {
            id,
            source: std::sync::Arc::clone(&data),
            train: idx.clone(),
            test: Vec::new(),
        })
        .collect();
    let global: Batch = data.full_batch();
    Ok(check_homogeneous_round(&model, &params, &clients, &global, 0.1, samples, seed)?)
}

/// Concentrations swept by [`bias`].
pub fn bias_concentrations() -> Vec<Concentration> {
    vec![
        Concentration::Exact,
        Concentration::Dirichlet(1.0),
        Concentration::Dirichlet(0.5),
        Concentration::Dirichlet(0.1),
    ]
}

/// Split-update bias against heterogeneity: MLP `[8, 8, 8, 8, 8]` with 4
/// classes (five layer groups, two clients each), ten clients over ten
/// copies of 40 samples. A single-group model would show no bias at all,
/// since every client then trains the whole model.
pub fn bias(seed: u64, replicates: usize) -> Result<(TheoryReport, Vec<BiasSweepPoint>), CliError> {
    let (model, params) = build_model(&ModelSpec::mlp(&[8, 8, 8, 8, 8], 4, seed))?;
    let base = BlobGenerator::new(8, 4, 1.0, seed)?.sample(40, 0)?;
    let data = base.tiled(10)?;
    let cfg = BiasSweepConfig {
        clients: 10,
        concentrations: bias_concentrations(),
        replicates,
        mc_samples: 0,
        lr: 0.1,
        seed,
    };
    Ok(bias_sweep(&model, &params, &data, &cfg)?)
}

/// Runs the configured experiment and fits its gradient-norm trend.
pub fn trend(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<TheoryReport, CliError> {
    let (setup, fc) = prepare(cfg, threads)?;
    let result = spryfed::fedcore::run_federation(&setup, &fc)?;
    Ok(convergence_trend(&result.trace, cfg.seed)?)
}

/// Runs a named suite with `samples` Monte-Carlo draws (or partition
/// replicates for the bias sweep).
pub fn run_suite(
    name: &str,
    cfg: &ExperimentConfig,
    samples: Option<usize>,
    threads: Option<usize>,
) -> Result<Vec<TheoryReport>, CliError> {
    let seed = cfg.seed;
    Ok(match name {
        "unbiasedness" => vec![unbiasedness(seed, samples.unwrap_or(100_000))?],
        "second_moment" => vec![second_moment(seed, samples.unwrap_or(100_000))?],
        "homogeneous_round" => vec![homogeneous_round(seed, samples.unwrap_or(10_000))?],
        "bias_sweep" => vec![bias(seed, samples.unwrap_or(50))?.0],
        "convergence_trend" => vec![trend(cfg, threads)?],
        other => {
            return Err(CliError::UnknownSuite(format!(
                "unknown suite `{}`; expected one of {}",
                other,
                SUITES.join(", ")
            )))
        }
    })
}
