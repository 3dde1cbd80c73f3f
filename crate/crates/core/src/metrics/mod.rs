//! Measurements and theoretical oracles.

mod sweep;
mod trajectory;

use crate::linalg::{gaussian_matrix, matmul_tn, DenseMatrix, EntityKind, RngStream};
use crate::model::ForwardTrace;
use crate::scalar::Scalar;

pub use sweep::{log_log_slope, stability_sweep, StabilityReport, SweepAxis, SweepPoint};
pub use trajectory::{trajectory_oracle, ClientTrajectory, TrajectoryStep};

/// One row of the emitted log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub round: usize,
    /// Validation loss (see [`crate::fed::Simulation::evaluate`]).
    pub mean_loss: f64,
    pub ppl_analog: f64,
    /// Absent for round 0, where nothing has been trained.
    pub avg_grad_norm: Option<f64>,
    /// Per-layer mean of the adapter contribution `gamma B A x`.
    pub act_mean: Vec<f64>,
    /// Per-layer variance of the adapter contribution.
    pub act_var: Vec<f64>,
    pub diverged_count: usize,
}

/// Mean over matrices of their per-entry RMS, `||G||_F / sqrt(len)`.
/// Zero for an empty set.
pub fn avg_grad_norm<'a, T: Scalar>(grads: impl IntoIterator<Item = &'a DenseMatrix<T>>) -> f64 {
    let (mut total, mut count) = (0.0, 0usize);
    for g in grads {
        total += g.frobenius_norm().as_f64() / (g.len() as f64).sqrt();
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Mean and (population) variance over all entries of each layer's adapter
/// contribution in the batch.
pub fn activation_moments<T: Scalar>(trace: &ForwardTrace<T>) -> Vec<(f64, f64)> {
    trace
        .layers
        .iter()
        .map(|l| {
            let data = l.contribution.data();
            let n = data.len() as f64;
            let mean = data.iter().map(|v| v.as_f64()).sum::<f64>() / n;
            let var = data
                .iter()
                .map(|v| (v.as_f64() - mean).powi(2))
                .sum::<f64>()
                / n;
            (mean, var)
        })
        .collect()
}

/// Summary of a Monte-Carlo `k x k` second-moment estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentEstimate {
    pub diag_mean: f64,
    pub max_off_diag: f64,
}

impl MomentEstimate {
    fn of(m: &DenseMatrix<f64>) -> Self {
        let k = m.rows();
        let diag_mean = (0..k).map(|i| m.get(i, i)).sum::<f64>() / k as f64;
        let mut max_off_diag: f64 = 0.0;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    max_off_diag = max_off_diag.max(m.get(i, j).abs());
                }
            }
        }
        Self {
            diag_mean,
            max_off_diag,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentCheck {
    /// Estimate of `E[A_bar^T A_bar]`.
    pub mean_mean: MomentEstimate,
    /// Estimate of `E[A_i^T A_bar]`, using client 0.
    pub own_mean: MomentEstimate,
    /// `(r / N) sigma^2`, the value both diagonals should approach.
    pub target: f64,
}

/// Monte-Carlo estimate of the second moments of the averaged initial `A`
/// across `n_clients` independent `r x k` Gaussian draws.
pub fn moment_identity_check(
    rank: usize,
    n_clients: usize,
    k: usize,
    sigma_a: f64,
    samples: usize,
    seed: u64,
) -> MomentCheck {
    assert!(rank > 0 && n_clients > 0 && k > 0 && samples > 0);
    let mut acc_mean = DenseMatrix::<f64>::zeros(k, k);
    let mut acc_own = DenseMatrix::<f64>::zeros(k, k);
    for s in 0..samples {
        let mut rng = RngStream::new(seed, EntityKind::MomentCheck, s as u64, 0);
        let draws: Vec<DenseMatrix<f64>> = (0..n_clients)
            .map(|_| gaussian_matrix(rank, k, sigma_a, &mut rng))
            .collect();
        let mut a_bar = DenseMatrix::zeros(rank, k);
        for a in &draws {
            a_bar.add_scaled(1.0, a).expect("equal shapes");
        }
        let a_bar = a_bar.scale(1.0 / n_clients as f64);
        acc_mean
            .add_scaled(1.0, &matmul_tn(&a_bar, &a_bar).expect("conformable"))
            .expect("k x k");
        acc_own
            .add_scaled(1.0, &matmul_tn(&draws[0], &a_bar).expect("conformable"))
            .expect("k x k");
    }
    let inv = 1.0 / samples as f64;
    MomentCheck {
        mean_mean: MomentEstimate::of(&acc_mean.scale(inv)),
        own_mean: MomentEstimate::of(&acc_own.scale(inv)),
        target: rank as f64 / n_clients as f64 * sigma_a * sigma_a,
    }
}
