//! Client-local optimizers for adapter parameters.

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterGradients, LoraAdapter};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) weight decay.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Which adapter matrices a step may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateMask {
    pub a: bool,
    pub b: bool,
}

impl UpdateMask {
    pub const BOTH: Self = Self { a: true, b: true };
    pub const ONLY_A: Self = Self { a: true, b: false };
    pub const ONLY_B: Self = Self { a: false, b: true };
}

#[derive(Debug, Clone, PartialEq)]
struct Moments<T> {
    first: DenseMatrix<T>,
    second: DenseMatrix<T>,
    step: u64,
}

impl<T: Scalar> Moments<T> {
    fn new(rows: usize, cols: usize) -> Self {
        Self {
            first: DenseMatrix::zeros(rows, cols),
            second: DenseMatrix::zeros(rows, cols),
            step: 0,
        }
    }
}

/// Optimizer state for one adapter. Never shared between clients.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    kind: OptimizerKind,
    lr: f64,
    adam: AdamConfig,
    moments_a: Option<Moments<T>>,
    moments_b: Option<Moments<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            adam: AdamConfig::default(),
            moments_a: None,
            moments_b: None,
        }
    }

    pub fn adam(lr: f64, adam: AdamConfig) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            adam,
            moments_a: None,
            moments_b: None,
        }
    }

    pub fn new(kind: OptimizerKind, lr: f64, adam: AdamConfig) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::sgd(lr),
            OptimizerKind::Adam => Self::adam(lr, adam),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Number of Adam steps taken on `(A, B)`.
    pub fn steps(&self) -> (u64, u64) {
        (
            self.moments_a.as_ref().map_or(0, |m| m.step),
            self.moments_b.as_ref().map_or(0, |m| m.step),
        )
    }

    /// Drops all moment buffers and step counters.
    pub fn reset(&mut self) {
        self.moments_a = None;
        self.moments_b = None;
    }
}

/// One optimizer step. A non-finite gradient leaves the parameters untouched
/// and returns [`Error::NonFiniteGradient`].
pub fn apply_update<T: Scalar>(
    state: &mut OptimizerState<T>,
    adapter: &mut LoraAdapter<T>,
    grads: &AdapterGradients<T>,
    mask: UpdateMask,
) -> Result<()> {
    if (mask.a && !grads.grad_a.is_finite()) || (mask.b && !grads.grad_b.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    let (a, b) = adapter.params_mut();
    a.check_same_shape(&grads.grad_a, "apply_update")?;
    b.check_same_shape(&grads.grad_b, "apply_update")?;
    let lr = state.lr;
    let adam = state.adam;
    match state.kind {
        OptimizerKind::Sgd => {
            if mask.a {
                a.add_scaled(T::of(-lr), &grads.grad_a)?;
            }
            if mask.b {
                b.add_scaled(T::of(-lr), &grads.grad_b)?;
            }
        }
        OptimizerKind::Adam => {
            if mask.a {
                let m = state
                    .moments_a
                    .get_or_insert_with(|| Moments::new(a.rows(), a.cols()));
                adam_step(a, &grads.grad_a, m, lr, &adam);
            }
            if mask.b {
                let m = state
                    .moments_b
                    .get_or_insert_with(|| Moments::new(b.rows(), b.cols()));
                adam_step(b, &grads.grad_b, m, lr, &adam);
            }
        }
    }
    Ok(())
}

fn adam_step<T: Scalar>(
    param: &mut DenseMatrix<T>,
    grad: &DenseMatrix<T>,
    m: &mut Moments<T>,
    lr: f64,
    cfg: &AdamConfig,
) {
    m.step += 1;
    let t = m.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let one = T::one();
    let correction1 = one - b1.powi(t);
    let correction2 = one - b2.powi(t);
    let lr = T::of(lr);
    let eps = T::of(cfg.eps);
    let decay = one - lr * T::of(cfg.weight_decay);
    let params = param.data_mut();
    let first = m.first.data_mut();
    let second = m.second.data_mut();
    for (i, &g) in grad.data().iter().enumerate() {
        first[i] = b1 * first[i] + (one - b1) * g;
        second[i] = b2 * second[i] + (one - b2) * g * g;
        let m_hat = first[i] / correction1;
        let v_hat = second[i] / correction2;
        params[i] = params[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
    }
}
