//! Monte-Carlo and analytic checks of the estimator theory.
//!
//! Every check returns a [`TheoryReport`] listing measured statistics with
//! their standard errors, reference values where a formula exists, and
//! assertions with their tolerance and sample size. Monte-Carlo assertions
//! use a 4-standard-error tolerance.

mod bias;
mod monte_carlo;

pub use bias::{bias_sweep, BiasSweepConfig, BiasSweepPoint};
pub use monte_carlo::{check_homogeneous_round, check_second_moment, check_unbiasedness, Moments};

use serde::{Deserialize, Serialize};

use crate::error::{argument, Error, Result};
use crate::fedcore::MetricsTrace;

/// Standard-error multiple used by every Monte-Carlo assertion.
pub const Z_TOLERANCE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Statistic {
    pub name: String,
    pub value: f64,
    pub std_err: Option<f64>,
    /// Value predicted by a closed form, when one exists.
    pub predicted: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub tolerance: String,
    pub sample_size: u64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub experiment: String,
    pub seed: u64,
    pub statistics: Vec<Statistic>,
    pub assertions: Vec<Assertion>,
    pub notes: Vec<String>,
}

impl TheoryReport {
    pub fn new(experiment: impl Into<String>, seed: u64) -> Self {
        Self {
            experiment: experiment.into(),
            seed,
            statistics: Vec::new(),
            assertions: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn stat(&mut self, name: impl Into<String>, value: f64, std_err: Option<f64>, predicted: Option<f64>) {
        self.statistics.push(Statistic {
            name: name.into(),
            value,
            std_err,
            predicted,
        });
    }

    pub fn assert(
        &mut self,
        name: impl Into<String>,
        passed: bool,
        tolerance: impl Into<String>,
        sample_size: u64,
        detail: impl Into<String>,
    ) {
        self.assertions.push(Assertion {
            name: name.into(),
            passed,
            tolerance: tolerance.into(),
            sample_size,
            detail: detail.into(),
        });
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    pub fn get(&self, name: &str) -> Option<&Statistic> {
        self.statistics.iter().find(|s| s.name == name)
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.get(name).map(|s| s.value)
    }

    /// True when every assertion passed (vacuously true without assertions).
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }
}

/// `(x − reference) / se`, with `0/0 = 0` and `x/0 = ∞`.
pub fn z_score(x: f64, reference: f64, se: f64) -> f64 {
    let diff = x - reference;
    if se > 0.0 {
        diff / se
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY.copysign(diff)
    }
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; NaN when either
/// side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(argument!("spearman needs two equally long series of at least two points"));
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Inputs of the local learning-rate conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateConstants {
    /// Gradient magnitude bound `G`.
    pub g: f64,
    /// Smoothness `L`.
    pub l_smooth: f64,
    pub tau: f64,
    pub beta2: f64,
    /// Global learning rate `η`.
    pub eta: f64,
    /// Perturbed dimension `d`.
    pub d: f64,
    pub k: f64,
    /// Clients training the same weights, `M̄`.
    pub m_bar: f64,
    /// `Σ_m Σ_c α_{m,c}²`; zero gives an unbounded fourth term.
    pub sum_alpha_sq: f64,
}

/// The four order terms of the local learning-rate conditions, unit constants.
pub fn learning_rate_terms(c: &RateConstants) -> Result<[f64; 4]> {
    let positive = [c.g, c.l_smooth, c.tau, c.eta, c.d, c.k, c.m_bar];
    if positive.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
        return Err(argument!("G, L, τ, η, d, K and M̄ must be positive and finite"));
    }
    if !(c.beta2 > 0.0 && c.beta2 < 1.0) {
        return Err(argument!("β₂ must lie in (0, 1)"));
    }
    if !(c.sum_alpha_sq >= 0.0) || !c.sum_alpha_sq.is_finite() {
        return Err(argument!("Σα² must be finite and nonnegative"));
    }
    let sb = c.beta2.sqrt();
    let t1 = (c.tau * c.tau / (sb * c.eta * c.g * c.l_smooth)).sqrt();
    let t2 = 1.0 / (sb * c.g);
    let t3 = (c.tau.powi(3) / ((c.beta2 * (1.0 - c.beta2)).sqrt() * c.g * c.g)).sqrt();
    let t4 = if c.sum_alpha_sq == 0.0 {
        f64::INFINITY
    } else {
        c.m_bar * c.k / (c.beta2 * c.g * (3.0 * c.d + c.k - 1.0) * c.sum_alpha_sq)
    };
    Ok([t1, t2, t3, t4])
}

/// Minimum of [`learning_rate_terms`].
pub fn learning_rate_bound(c: &RateConstants) -> Result<f64> {
    Ok(learning_rate_terms(c)?.into_iter().fold(f64::INFINITY, f64::min))
}

/// Fewest rounds a trend fit accepts.
pub const MIN_TREND_ROUNDS: usize = 50;

/// Running minimum of the gradient-norm proxy.
pub fn min_so_far(trace: &MetricsTrace) -> Vec<f64> {
    let mut best = f64::INFINITY;
    trace
        .rows
        .iter()
        .map(|r| {
            best = best.min(r.grad_norm_proxy);
            best
        })
        .collect()
}

/// Least-squares fit of `y_R ≈ a + b/R`; returns `(a, b)`.
fn fit_inverse(ys: &[f64]) -> (f64, f64) {
    let n = ys.len() as f64;
    let xs: Vec<f64> = (1..=ys.len()).map(|r| 1.0 / r as f64).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    let b = sxy / sxx;
    (my - b * mx, b)
}

/// Fits the running-minimum gradient-norm proxy against `a + b/R`.
///
/// Asserts `b > 0`, that the running minimum never increases, and that it
/// is strictly lower at the last round than at round 50. A trace whose proxy
/// never moves is reported as having no dynamics and fails.
pub fn convergence_trend(trace: &MetricsTrace, seed: u64) -> Result<TheoryReport> {
    let n = trace.rows.len();
    if n < MIN_TREND_ROUNDS {
        return Err(Error::InsufficientData(format!(
            "trend fit needs at least {} rounds, trace has {}",
            MIN_TREND_ROUNDS, n
        )));
    }
    let mins = min_so_far(trace);
    let mut report = TheoryReport::new("convergence_trend", seed);
    let first = trace.rows[0].grad_norm_proxy;
    if trace.rows.iter().all(|r| r.grad_norm_proxy == first) {
        report.note("no-dynamics: the gradient-norm proxy is constant; fit rejected");
        report.assert("dynamics_present", false, "proxy must change", n as u64, "flat trace");
        return Ok(report);
    }
    let (a, b) = fit_inverse(&mins);
    let at50 = mins[MIN_TREND_ROUNDS - 1];
    let last = mins[n - 1];
    report.stat("fit_a", a, None, None);
    report.stat("fit_b", b, None, None);
    report.stat("min_so_far_at_50", at50, None, None);
    report.stat("min_so_far_final", last, None, None);
    report.stat("rounds", n as f64, None, None);
    report.assert("fit_b_positive", b > 0.0, "b > 0", n as u64, format!("b = {:e}", b));
    report.assert(
        "min_so_far_nonincreasing",
        mins.windows(2).all(|w| w[1] <= w[0]),
        "exact",
        n as u64,
        "running minimum",
    );
    report.assert(
        "final_below_round_50",
        last < at50,
        "strict",
        n as u64,
        format!("{:e} < {:e}", last, at50),
    );
    Ok(report)
}

/// Compares the final running minimum of a homogeneous and a heterogeneous
/// run; the heterogeneous floor must be strictly higher.
pub fn compare_floors(homogeneous: &MetricsTrace, heterogeneous: &MetricsTrace, seed: u64) -> Result<TheoryReport> {
    let (h, x) = (min_so_far(homogeneous), min_so_far(heterogeneous));
    let (Some(&fh), Some(&fx)) = (h.last(), x.last()) else {
        return Err(Error::InsufficientData("both traces need at least one round".into()));
    };
    let mut report = TheoryReport::new("heterogeneity_floor", seed);
    report.stat("floor_homogeneous", fh, None, None);
    report.stat("floor_heterogeneous", fx, None, None);
    report.assert(
        "heterogeneous_floor_higher",
        fx > fh,
        "strict",
        h.len().min(x.len()) as u64,
        format!("{:e} > {:e}", fx, fh),
    );
    Ok(report)
}
