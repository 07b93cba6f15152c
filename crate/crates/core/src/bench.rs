//! Scaling benchmarks for the exact and fast gradient paths.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exact::{gradient_exact_with, Method};
use crate::limits::Limits;
use crate::lowrank::gradient_fast_with;
use crate::sample::{random_instance, DEFAULT_NOISE_SIGMA};
use crate::verify::compare_vectors;
use crate::TOOL_VERSION;

#[derive(Clone, Debug, Serialize)]
pub struct SizeFailure {
    pub n: usize,
    pub error: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub method: String,
    pub sizes: Vec<usize>,
    pub d: usize,
    #[serde(rename = "B")]
    pub bound: f64,
    pub eps: f64,
    /// Median wall-clock seconds per size.
    pub seconds: Vec<f64>,
    /// `‖g − g_exact‖∞` per size; zero for the exact path.
    pub max_err_vs_exact: Vec<f64>,
    pub fitted_loglog_slope: f64,
    pub seed: u64,
    pub repeats: usize,
    pub tool_version: String,
    /// Sizes that could not run; they are left out of `sizes`.
    pub failures: Vec<SizeFailure>,
}

impl BenchReport {
    /// Rows `n,method,seconds,max_err` without a header.
    pub fn csv_rows(&self) -> Vec<String> {
        self.sizes
            .iter()
            .zip(&self.seconds)
            .zip(&self.max_err_vs_exact)
            .map(|((n, s), e)| format!("{n},{},{s:.9},{e:.6e}", self.method))
            .collect()
    }
}

pub const CSV_HEADER: &str = "n,method,seconds,max_err";

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "slope fit needs two or more paired points, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidArgument("slope fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("slope fit needs distinct sizes".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    Ok(sxy / sxx)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let k = values.len();
    if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub d: usize,
    pub bound: f64,
    pub eps: f64,
    pub repeats: usize,
    pub seed: u64,
    /// Compare the fast path against the exact gradient at each size.
    pub check_error: bool,
}

/// Times `method` at each size; instance generation is outside the timed
/// region. A size that fails is recorded in `failures` and skipped.
pub fn run_bench(method: Method, cfg: &BenchConfig, limits: &Limits) -> Result<BenchReport> {
    if !matches!(method, Method::Exact | Method::Fast) {
        return Err(Error::InvalidArgument(format!("benchmarks support exact and fast, got {method}")));
    }
    if cfg.repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be positive".into()));
    }
    if cfg.sizes.is_empty() || cfg.sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("sizes must be nonempty and strictly increasing".into()));
    }
    let mut report = BenchReport {
        method: method.as_str().to_string(),
        sizes: Vec::new(),
        d: cfg.d,
        bound: cfg.bound,
        eps: cfg.eps,
        seconds: Vec::new(),
        max_err_vs_exact: Vec::new(),
        fitted_loglog_slope: f64::NAN,
        seed: cfg.seed,
        repeats: cfg.repeats,
        tool_version: TOOL_VERSION.to_string(),
        failures: Vec::new(),
    };
    for &n in &cfg.sizes {
        let inst = random_instance(n, cfg.d, cfg.bound, cfg.seed, DEFAULT_NOISE_SIGMA)?;
        let run = || match method {
            Method::Exact => gradient_exact_with(&inst, limits),
            _ => gradient_fast_with(&inst, cfg.eps, limits),
        };
        let mut times = Vec::with_capacity(cfg.repeats);
        let mut last = None;
        let mut failed = None;
        for _ in 0..cfg.repeats {
            let started = Instant::now();
            match run() {
                Ok(g) => {
                    times.push(started.elapsed().as_secs_f64().max(f64::MIN_POSITIVE));
                    last = Some(g);
                }
                Err(e) => {
                    failed = Some(e.to_string());
                    break;
                }
            }
        }
        if let Some(error) = failed {
            report.failures.push(SizeFailure { n, error });
            continue;
        }
        let result = last.expect("repeats > 0");
        let err = if method == Method::Fast && cfg.check_error {
            match gradient_exact_with(&inst, limits) {
                Ok(exact) => compare_vectors(&result.g, &exact.g)?.max_abs,
                Err(_) => f64::NAN,
            }
        } else {
            0.0
        };
        report.sizes.push(n);
        report.seconds.push(median(&mut times));
        report.max_err_vs_exact.push(err);
    }
    if report.sizes.len() >= 2 {
        let xs: Vec<f64> = report.sizes.iter().map(|&n| n as f64).collect();
        report.fitted_loglog_slope = fit_loglog_slope(&xs, &report.seconds)?;
    }
    Ok(report)
}
