//! Low-rank adapters, their scaling rules, and the closed-form forward and
//! backward passes.
//!
//! An adapter attached to a frozen weight `W0 (d x k)` holds `A (r x k)` and
//! `B (d x r)` and computes `h = W0 x + gamma * B A x`. With `v = dL/dh` the
//! parameter gradients are
//!
//! ```text
//! dL/dB = gamma * v x^T A^T
//! dL/dA = gamma * B^T v x^T
//! dL/dx = gamma * A^T B^T v      (adapter path only)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, matmul, matmul_nt, matmul_tn, DenseMatrix, RngStream};
use crate::scalar::Scalar;

/// How `gamma` depends on the client count `N` and the rank `r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalingRule {
    /// `alpha / r`
    Standard {
        alpha: f64,
    },
    /// `alpha / sqrt(r)`
    RankStabilized {
        alpha: f64,
    },
    /// `alpha * sqrt(N / r)`
    Federated {
        alpha: f64,
    },
    /// `1 / (sqrt(N) * sqrt(r))`
    AblationSmall,
    /// `N^2 / sqrt(r)`
    AblationLarge,
    Fixed {
        value: f64,
    },
}

impl ScalingRule {
    /// Short lowercase name used in logs and metric files.
    pub fn name(&self) -> &'static str {
        match self {
            ScalingRule::Standard { .. } => "standard",
            ScalingRule::RankStabilized { .. } => "rank_stabilized",
            ScalingRule::Federated { .. } => "federated",
            ScalingRule::AblationSmall => "ablation_small",
            ScalingRule::AblationLarge => "ablation_large",
            ScalingRule::Fixed { .. } => "fixed",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ScalingRule::Standard { alpha }
            | ScalingRule::RankStabilized { alpha }
            | ScalingRule::Federated { alpha } => {
                if !(alpha > 0.0 && alpha.is_finite()) {
                    return Err(Error::config(
                        "alpha",
                        format!("must be positive, got {alpha}"),
                    ));
                }
            }
            ScalingRule::Fixed { value } => {
                if !(value > 0.0 && value.is_finite()) {
                    return Err(Error::config(
                        "fixed_gamma",
                        format!("must be positive, got {value}"),
                    ));
                }
            }
            ScalingRule::AblationSmall | ScalingRule::AblationLarge => {}
        }
        Ok(())
    }
}

/// Resolves the scaling factor for a run with `n_clients` clients and rank `rank`.
pub fn scaling_factor(rule: ScalingRule, n_clients: usize, rank: usize) -> Result<f64> {
    if n_clients == 0 {
        return Err(Error::config("n_clients", "must be at least 1"));
    }
    if rank == 0 {
        return Err(Error::config("rank", "must be at least 1"));
    }
    rule.validate()?;
    let n = n_clients as f64;
    let r = rank as f64;
    Ok(match rule {
        ScalingRule::Standard { alpha } => alpha / r,
        ScalingRule::RankStabilized { alpha } => alpha / r.sqrt(),
        ScalingRule::Federated { alpha } => alpha * (n / r).sqrt(),
        ScalingRule::AblationSmall => 1.0 / (n.sqrt() * r.sqrt()),
        ScalingRule::AblationLarge => n * n / r.sqrt(),
        ScalingRule::Fixed { value } => value,
    })
}

/// Trainable low-rank pair attached to one frozen matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    a: DenseMatrix<T>,
    b: DenseMatrix<T>,
    gamma: Option<T>,
    /// Initial std-dev of `A`; unknown for adapters assembled from parts.
    sigma_a: Option<f64>,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn from_parts(a: DenseMatrix<T>, b: DenseMatrix<T>, gamma: T) -> Result<Self> {
        if a.rows() != b.cols() {
            return Err(Error::shape(
                "adapter",
                format!(
                    "A is {}x{} but B is {}x{}",
                    a.rows(),
                    a.cols(),
                    b.rows(),
                    b.cols()
                ),
            ));
        }
        Ok(Self {
            a,
            b,
            gamma: Some(gamma),
            sigma_a: None,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    pub fn a(&self) -> &DenseMatrix<T> {
        &self.a
    }

    pub fn b(&self) -> &DenseMatrix<T> {
        &self.b
    }

    pub fn sigma_a(&self) -> Option<f64> {
        self.sigma_a
    }

    pub fn gamma(&self) -> Result<T> {
        self.gamma.ok_or(Error::UnboundScaling)
    }

    /// Freezes `gamma` for the run. Rebinding replaces the previous value.
    pub fn bind(&mut self, gamma: T) {
        self.gamma = Some(gamma);
    }

    pub fn with_gamma(mut self, gamma: T) -> Self {
        self.bind(gamma);
        self
    }

    pub fn set_a(&mut self, a: DenseMatrix<T>) -> Result<()> {
        self.a.check_same_shape(&a, "set_a")?;
        self.a = a;
        Ok(())
    }

    pub fn set_b(&mut self, b: DenseMatrix<T>) -> Result<()> {
        self.b.check_same_shape(&b, "set_b")?;
        self.b = b;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> (&mut DenseMatrix<T>, &mut DenseMatrix<T>) {
        (&mut self.a, &mut self.b)
    }

    /// `B A` scaled by gamma.
    pub fn delta(&self) -> Result<DenseMatrix<T>> {
        Ok(matmul(&self.b, &self.a)?.scale(self.gamma()?))
    }
}

/// Zero `B (d x r)`, Gaussian `A (r x k)`; gamma stays unbound.
pub fn init_adapter<T: Scalar>(
    d: usize,
    k: usize,
    r: usize,
    sigma_a: f64,
    rng: &mut RngStream,
) -> LoraAdapter<T> {
    LoraAdapter {
        a: gaussian_matrix(r, k, sigma_a, rng),
        b: DenseMatrix::zeros(d, r),
        gamma: None,
        sigma_a: Some(sigma_a),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterOutput<T> {
    /// `W0 x + gamma B A x`
    pub h: DenseMatrix<T>,
    /// `gamma B A x`
    pub contribution: DenseMatrix<T>,
    /// `A x`, kept for the backward pass.
    pub projected: DenseMatrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGradients<T> {
    pub grad_a: DenseMatrix<T>,
    pub grad_b: DenseMatrix<T>,
    /// Adapter path only; the frozen path `W0^T v` is added by the caller.
    pub grad_x: DenseMatrix<T>,
}

impl<T: Scalar> AdapterGradients<T> {
    pub fn is_finite(&self) -> bool {
        self.grad_a.is_finite() && self.grad_b.is_finite() && self.grad_x.is_finite()
    }
}

fn check_w0<T: Scalar>(adapter: &LoraAdapter<T>, w0: &DenseMatrix<T>) -> Result<()> {
    if w0.shape() != (adapter.out_dim(), adapter.in_dim()) {
        return Err(Error::shape(
            "adapter_forward",
            format!(
                "W0 is {}x{} but adapter maps {} -> {}",
                w0.rows(),
                w0.cols(),
                adapter.in_dim(),
                adapter.out_dim()
            ),
        ));
    }
    Ok(())
}

pub fn adapter_forward<T: Scalar>(
    adapter: &LoraAdapter<T>,
    w0: &DenseMatrix<T>,
    x: &DenseMatrix<T>,
) -> Result<AdapterOutput<T>> {
    check_w0(adapter, w0)?;
    let gamma = adapter.gamma()?;
    let base = matmul(w0, x)?;
    let projected = matmul(&adapter.a, x)?;
    let contribution = matmul(&adapter.b, &projected)?.scale(gamma);
    let h = base.add(&contribution)?;
    Ok(AdapterOutput {
        h,
        contribution,
        projected,
    })
}

pub fn adapter_backward<T: Scalar>(
    adapter: &LoraAdapter<T>,
    x: &DenseMatrix<T>,
    v: &DenseMatrix<T>,
) -> Result<AdapterGradients<T>> {
    let projected = matmul(&adapter.a, x)?;
    adapter_backward_projected(adapter, x, &projected, v)
}

/// Backward pass reusing a cached `A x` from the forward pass.
pub fn adapter_backward_projected<T: Scalar>(
    adapter: &LoraAdapter<T>,
    x: &DenseMatrix<T>,
    projected: &DenseMatrix<T>,
    v: &DenseMatrix<T>,
) -> Result<AdapterGradients<T>> {
    let gamma = adapter.gamma()?;
    if v.rows() != adapter.out_dim() || v.cols() != x.cols() {
        return Err(Error::shape(
            "adapter_backward",
            format!(
                "v is {}x{}, expected {}x{}",
                v.rows(),
                v.cols(),
                adapter.out_dim(),
                x.cols()
            ),
        ));
    }
    if projected.shape() != (adapter.rank(), x.cols()) {
        return Err(Error::shape(
            "adapter_backward",
            "cached projection does not match x",
        ));
    }
    let grad_b = matmul_nt(v, projected)?.scale(gamma);
    // B^T v, shared by the A and x gradients.
    let bt_v = matmul_tn(&adapter.b, v)?;
    let grad_a = matmul_nt(&bt_v, x)?.scale(gamma);
    let grad_x = matmul_tn(&adapter.a, &bt_v)?.scale(gamma);
    Ok(AdapterGradients {
        grad_a,
        grad_b,
        grad_x,
    })
}

/// `W0 + gamma B A`
pub fn merge_adapter<T: Scalar>(
    adapter: &LoraAdapter<T>,
    w0: &DenseMatrix<T>,
) -> Result<DenseMatrix<T>> {
    check_w0(adapter, w0)?;
    w0.add(&adapter.delta()?)
}
