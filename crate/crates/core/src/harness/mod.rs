//! Experiment runner: configs, seeded grid points and CSV outputs.

mod config;
mod experiments;

use std::io::Write;

pub use config::{derive_seed, Axis, ExperimentConfig, ExperimentKind, ImbalanceModel};
pub use experiments::{
    decide, load_dataset, probe_point, risk_prealarm, run_convergence, run_estimate, run_factors,
    run_prealarm, run_validate_attack, ConvergenceCell, Decision, PointResult, PrealarmOutcome,
};

use crate::error::Result;

/// Execution settings that do not change results.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out_dir: Option<std::path::PathBuf>,
    /// Worker threads for grid points; ignored in serial mode.
    pub workers: usize,
    pub serial: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            out_dir: None,
            workers: 1,
            serial: true,
        }
    }
}

/// One grid point of an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub config_hash: String,
    pub axis_value: f64,
    pub seed: u64,
    pub mi_nats: f64,
    pub cov_baseline: f64,
    /// Missing when no attack ran or it failed.
    pub epsilon: Option<f64>,
    pub converged: bool,
    pub wall_time_s: f64,
}

pub const GRID_HEADER: &str = "axis_value,mi_nats,cov_baseline,epsilon,converged";

/// Grid CSV: fixed header, one row per point; a missing `ε` is empty.
pub fn write_grid_csv<W: Write>(mut out: W, records: &[RunRecord]) -> Result<()> {
    writeln!(out, "{GRID_HEADER}")?;
    for r in records {
        let eps = r.epsilon.map(|e| format!("{e:?}")).unwrap_or_default();
        writeln!(
            out,
            "{:?},{:?},{:?},{eps},{}",
            r.axis_value, r.mi_nats, r.cov_baseline, r.converged
        )?;
    }
    Ok(())
}

/// Full records including hash, seed and timing.
pub fn write_runs_csv<W: Write>(mut out: W, records: &[RunRecord]) -> Result<()> {
    writeln!(out, "config_hash,axis_value,seed,mi_nats,cov_baseline,epsilon,converged,wall_time_s")?;
    for r in records {
        let eps = r.epsilon.map(|e| format!("{e:?}")).unwrap_or_default();
        writeln!(
            out,
            "{},{:?},{},{:?},{:?},{eps},{},{:.3}",
            r.config_hash, r.axis_value, r.seed, r.mi_nats, r.cov_baseline, r.converged, r.wall_time_s
        )?;
    }
    Ok(())
}

/// Average ranks, ties sharing the mean of their positions (1-based).
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` for fewer than two points, a constant
/// side, or any non-finite value.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 || x.iter().chain(y).any(|v| !v.is_finite()) {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

/// Per-axis-value mean of a field over several record sets with the same
/// grid. Points where the field is missing in any set give NaN.
pub fn mean_over_seeds(runs: &[Vec<RunRecord>], field: impl Fn(&RunRecord) -> Option<f64>) -> Vec<f64> {
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    (0..first.len())
        .map(|i| {
            let vals: Vec<f64> = runs.iter().map(|r| field(&r[i]).unwrap_or(f64::NAN)).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect()
}
