//! Monte Carlo batches over independently seeded scenario realizations.

use std::path::Path;

use ingvio_core::estimator::{run_dataset, EstimatorConfig};
use ingvio_core::metrics::{summarize, Anees, Summary};
use ingvio_core::simulator::{generate, ScenarioConfig};
use ingvio_core::state::IMU_DIM;

use crate::dataset::{fmt_f64, TableWriter};
use crate::error::{Error, Result};

pub const RUNS_FILE: &str = "montecarlo_runs.csv";
pub const SUMMARY_FILE: &str = "montecarlo_summary.csv";

#[derive(Clone, Debug)]
pub struct RunStats {
    pub seed: u64,
    pub summary: Summary,
    pub aligned: bool,
}

#[derive(Clone, Debug)]
pub struct MonteCarloReport {
    pub runs: Vec<RunStats>,
    pub anees: Anees,
    pub rmse_mean: f64,
    pub rmse_std: f64,
}

/// Run `runs` realizations; run `i` uses seed `base_seed + i` for both the
/// scenario noise and the initial-state draw.
pub fn montecarlo(scenario: &ScenarioConfig, estimator: &EstimatorConfig, runs: usize, base_seed: u64, confidence: f64) -> Result<MonteCarloReport> {
    if runs < 2 {
        return Err(Error::Config("montecarlo needs at least 2 runs".into()));
    }
    let mut stats = Vec::with_capacity(runs);
    let mut series = Vec::with_capacity(runs);
    for i in 0..runs as u64 {
        let seed = base_seed.wrapping_add(i);
        let sc = ScenarioConfig { seed, ..scenario.clone() };
        let ds = generate(&sc)?;
        let result = run_dataset(&ds, estimator, seed)?;
        let summary = summarize(&result.errors)?;
        log::info!("run {}/{runs} seed {seed}: rmse {:.3} m, anees {:.3}", i + 1, summary.position_rmse, summary.anees);
        series.push(result.errors.iter().map(|e| e.nees).collect::<Vec<_>>());
        stats.push(RunStats { seed, summary, aligned: result.alignment.is_some() });
    }
    let anees = Anees::from_runs(&series, IMU_DIM, confidence)?;
    let rmse: Vec<f64> = stats.iter().map(|s| s.summary.position_rmse).collect();
    let n = rmse.len() as f64;
    let rmse_mean = rmse.iter().sum::<f64>() / n;
    let rmse_std = (rmse.iter().map(|r| (r - rmse_mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok(MonteCarloReport { runs: stats, anees, rmse_mean, rmse_std })
}

pub fn write_report(dir: &Path, report: &MonteCarloReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut w = TableWriter::create(
        &dir.join(RUNS_FILE),
        "montecarlo_runs",
        &["seed", "samples", "position_rmse_m", "final_position_error_m", "yaw_rmse_rad", "anees_per_dim", "aligned"],
    )?;
    for r in &report.runs {
        let s = &r.summary;
        w.row([
            r.seed.to_string(),
            s.samples.to_string(),
            fmt_f64(s.position_rmse),
            fmt_f64(s.final_position_error),
            fmt_f64(s.yaw_rmse),
            fmt_f64(s.anees),
            usize::from(r.aligned).to_string(),
        ])?;
    }
    w.finish()?;

    let a = &report.anees;
    let mut w = TableWriter::create(&dir.join(SUMMARY_FILE), "montecarlo_summary", &["key", "value"])?;
    w.row(["runs", &report.runs.len().to_string()])?;
    w.row(["dim", &a.dim.to_string()])?;
    for (k, v) in [
        ("anees", a.value),
        ("anees_per_dim", a.normalized()),
        ("chi2_lower", a.lower),
        ("chi2_upper", a.upper),
        ("position_rmse_mean_m", report.rmse_mean),
        ("position_rmse_std_m", report.rmse_std),
    ] {
        w.row([k.to_string(), fmt_f64(v)])?;
    }
    w.row(["within_chi2", if a.value >= a.lower && a.value <= a.upper { "1" } else { "0" }])?;
    w.finish()
}
