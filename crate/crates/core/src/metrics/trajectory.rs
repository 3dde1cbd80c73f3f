//! Closed-form first two updates of split aggregation on a single linear
//! layer with squared-error loss, one SGD step per round.
//!
//! This path deliberately shares nothing with the simulator beyond matrix
//! products, so agreement between the two is meaningful.

use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, DenseMatrix};

type M = DenseMatrix<f64>;

/// The mini-batch a client sees in one round, column-stacked.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub x: M,
    pub y: M,
}

/// Client state after rounds 1 and 2 (post-aggregation).
#[derive(Debug, Clone, PartialEq)]
pub struct ClientTrajectory {
    pub b1: M,
    pub a1: M,
    pub b2: M,
    pub a2: M,
}

fn mean(ms: &[M]) -> M {
    let mut sum = M::zeros(ms[0].rows(), ms[0].cols());
    for m in ms {
        sum.add_scaled(1.0, m).expect("equal shapes");
    }
    sum.scale(1.0 / ms.len() as f64)
}

/// `(W0 x + gamma B A x - y) / batch`
fn residual(w0: &M, b: &M, a: &M, gamma: f64, s: &TrajectoryStep) -> Result<M> {
    let mut f = matmul(w0, &s.x)?;
    f.add_scaled(gamma, &matmul(b, &matmul(a, &s.x)?)?)?;
    Ok(f.sub(&s.y)?.scale(1.0 / s.x.cols() as f64))
}

/// Expands the recursion for every client:
///
/// ```text
/// B1_i = -eta gamma v0_i x0_i^T A0_i^T
/// A1   = A_bar = mean_i A0_i
/// B2_i = B1_i - eta gamma v1_i x1_i^T A_bar^T
/// A2   = A_bar + eta^2 gamma^2 mean_i (A0_i x0_i v0_i^T v1_i x1_i^T)
/// ```
///
/// where `v0_i` is the residual at `B = 0` and `v1_i` the residual at
/// `(B1_i, A_bar)`.
pub fn trajectory_oracle(
    eta: f64,
    gamma: f64,
    w0: &M,
    a0: &[M],
    data: &[[TrajectoryStep; 2]],
) -> Result<Vec<ClientTrajectory>> {
    if a0.is_empty() {
        return Err(Error::NoClients);
    }
    if a0.len() != data.len() {
        return Err(Error::shape(
            "trajectory_oracle",
            format!(
                "{} initial A matrices but {} data sequences",
                a0.len(),
                data.len()
            ),
        ));
    }
    let a_bar = mean(a0);
    let zero_b = M::zeros(w0.rows(), a_bar.rows());
    let eg = eta * gamma;

    let mut b1s = Vec::with_capacity(a0.len());
    let mut b2s = Vec::with_capacity(a0.len());
    let mut corrections = Vec::with_capacity(a0.len());
    for (a0_i, [s0, s1]) in a0.iter().zip(data) {
        let v0 = residual(w0, &zero_b, a0_i, gamma, s0)?;
        // v0 x0^T A0^T, grouped as (v0 x0^T) A0^T
        let b1 = matmul_nt(&matmul_nt(&v0, &s0.x)?, a0_i)?.scale(-eg);
        let v1 = residual(w0, &b1, &a_bar, gamma, s1)?;
        let mut b2 = b1.clone();
        b2.add_scaled(-eg, &matmul_nt(&matmul_nt(&v1, &s1.x)?, &a_bar)?)?;
        // A0 x0 (v0^T v1) x1^T
        let left = matmul(a0_i, &s0.x)?;
        let inner = matmul(&v0.transpose(), &v1)?;
        let corr = matmul_nt(&matmul(&left, &inner)?, &s1.x)?.scale(eg * eg);
        b1s.push(b1);
        b2s.push(b2);
        corrections.push(corr);
    }
    let mut a2 = a_bar.clone();
    a2.add_scaled(1.0, &mean(&corrections))?;

    Ok(b1s
        .into_iter()
        .zip(b2s)
        .map(|(b1, b2)| ClientTrajectory {
            b1,
            a1: a_bar.clone(),
            b2,
            a2: a2.clone(),
        })
        .collect())
}
