use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fed::{run_experiment, ExperimentOutcome, Verdict};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Rank,
    Clients,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Rank => "rank",
            SweepAxis::Clients => "clients",
        }
    }

    pub fn apply(&self, base: &ExperimentConfig, value: usize) -> ExperimentConfig {
        let mut cfg = base.clone();
        match self {
            SweepAxis::Rank => cfg.rank = value,
            SweepAxis::Clients => cfg.n_clients = value,
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: usize,
    /// NaN when round 1 produced no gradient (e.g. `rounds = 0`).
    pub round1_grad_norm: f64,
    pub final_loss: f64,
    pub outcome: ExperimentOutcome,
}

impl SweepPoint {
    pub fn verdict(&self) -> Verdict {
        self.outcome.verdict
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
    /// max / min of the round-1 gradient norms.
    pub flatness_ratio: f64,
    /// Least-squares slope of log(round-1 norm) against log(value); 0 for a
    /// single value.
    pub slope: f64,
}

impl StabilityReport {
    pub fn values(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.value).collect()
    }

    pub fn round1_norms(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.round1_grad_norm).collect()
    }
}

/// Ordinary least-squares slope of `ln y` on `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    if xs.len() < 2 {
        return 0.0;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = xs.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

/// Runs one experiment per value with everything else, seeds included,
/// held fixed. With `base.parallel` the experiments run concurrently.
pub fn stability_sweep<T: Scalar>(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[usize],
) -> Result<StabilityReport> {
    if values.is_empty() {
        return Err(Error::config("values", "sweep needs at least one value"));
    }
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(
            "values",
            "swept values must be strictly increasing",
        ));
    }
    let configs: Vec<ExperimentConfig> = values.iter().map(|&v| axis.apply(base, v)).collect();
    for c in &configs {
        c.validate()?;
    }
    let run = |c: &ExperimentConfig| run_experiment::<T>(c);
    let outcomes: Vec<ExperimentOutcome> = if base.parallel {
        configs.par_iter().map(run).collect::<Result<_>>()?
    } else {
        configs.iter().map(run).collect::<Result<_>>()?
    };
    let points: Vec<SweepPoint> = values
        .iter()
        .zip(outcomes)
        .map(|(&value, outcome)| SweepPoint {
            value,
            round1_grad_norm: outcome
                .rounds
                .get(1)
                .and_then(|r| r.record.avg_grad_norm)
                .unwrap_or(f64::NAN),
            final_loss: outcome.final_loss(),
            outcome,
        })
        .collect();
    let norms: Vec<f64> = points.iter().map(|p| p.round1_grad_norm).collect();
    let max = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = norms.iter().copied().fold(f64::INFINITY, f64::min);
    let flatness_ratio = if norms.iter().any(|n| n.is_nan()) {
        f64::NAN
    } else if norms.len() == 1 {
        1.0
    } else {
        max / min
    };
    let xs: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    Ok(StabilityReport {
        axis,
        slope: log_log_slope(&xs, &norms),
        flatness_ratio,
        points,
    })
}
