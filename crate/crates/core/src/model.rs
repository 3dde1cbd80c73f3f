//! Stacks of frozen linear layers carrying adapters, with losses and manual
//! backpropagation.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adapter::{adapter_backward_projected, adapter_forward, AdapterGradients, LoraAdapter};
use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_tn, DenseMatrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(T::zero()),
        }
    }

    #[inline]
    fn derivative<T: Scalar>(self, pre: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Tanh => {
                let t = pre.tanh();
                T::one() - t * t
            }
            Activation::Relu => {
                if pre > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SquaredError,
    CrossEntropy,
}

/// Targets for one batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets<T> {
    /// `d_out x batch`, column-stacked like the inputs.
    Regression(DenseMatrix<T>),
    Classes(Vec<usize>),
}

impl<T: Scalar> Targets<T> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(y) => y.cols(),
            Targets::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLayer<T> {
    w0: Arc<DenseMatrix<T>>,
    pub adapter: LoraAdapter<T>,
    pub activation: Activation,
}

impl<T: Scalar> AdaptedLayer<T> {
    pub fn new(
        w0: Arc<DenseMatrix<T>>,
        adapter: LoraAdapter<T>,
        activation: Activation,
    ) -> Result<Self> {
        if w0.shape() != (adapter.out_dim(), adapter.in_dim()) {
            return Err(Error::shape(
                "layer",
                format!(
                    "W0 is {}x{} but adapter maps {} -> {}",
                    w0.rows(),
                    w0.cols(),
                    adapter.in_dim(),
                    adapter.out_dim()
                ),
            ));
        }
        Ok(Self {
            w0,
            adapter,
            activation,
        })
    }

    pub fn w0(&self) -> &DenseMatrix<T> {
        &self.w0
    }

    pub fn in_dim(&self) -> usize {
        self.w0.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w0.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedNetwork<T> {
    layers: Vec<AdaptedLayer<T>>,
    pub loss_kind: LossKind,
}

impl<T: Scalar> AdaptedNetwork<T> {
    pub fn new(layers: Vec<AdaptedLayer<T>>, loss_kind: LossKind) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("network", "at least one layer is required"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    "network",
                    format!(
                        "layer {i} outputs {} but layer {} expects {}",
                        pair[0].out_dim(),
                        i + 1,
                        pair[1].in_dim()
                    ),
                ));
            }
        }
        Ok(Self { layers, loss_kind })
    }

    pub fn layers(&self) -> &[AdaptedLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [AdaptedLayer<T>] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace<T> {
    pub input: DenseMatrix<T>,
    pub pre_activation: DenseMatrix<T>,
    /// `gamma B A x` for this layer.
    pub contribution: DenseMatrix<T>,
    /// `A x`
    pub projected: DenseMatrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    pub layers: Vec<LayerTrace<T>>,
}

pub fn forward<T: Scalar>(
    net: &AdaptedNetwork<T>,
    x: &DenseMatrix<T>,
) -> Result<(DenseMatrix<T>, ForwardTrace<T>)> {
    if x.rows() != net.in_dim() {
        return Err(Error::shape(
            "forward",
            format!(
                "input has {} rows, network expects {}",
                x.rows(),
                net.in_dim()
            ),
        ));
    }
    let mut traces = Vec::with_capacity(net.layers.len());
    let mut current = x.clone();
    for layer in &net.layers {
        let out = adapter_forward(&layer.adapter, &layer.w0, &current)?;
        let activated = out.h.map(|z| layer.activation.apply(z));
        traces.push(LayerTrace {
            input: current,
            pre_activation: out.h,
            contribution: out.contribution,
            projected: out.projected,
        });
        current = activated;
    }
    Ok((current, ForwardTrace { layers: traces }))
}

/// Output of the network with every adapter removed.
pub fn frozen_forward<T: Scalar>(
    net: &AdaptedNetwork<T>,
    x: &DenseMatrix<T>,
) -> Result<DenseMatrix<T>> {
    let mut current = x.clone();
    for layer in &net.layers {
        current = matmul(&layer.w0, &current)?.map(|z| layer.activation.apply(z));
    }
    Ok(current)
}

/// Batch-mean loss and its gradient with respect to the network output.
pub fn loss<T: Scalar>(
    output: &DenseMatrix<T>,
    target: &Targets<T>,
    kind: LossKind,
) -> Result<(T, DenseMatrix<T>)> {
    let batch = output.cols();
    if target.len() != batch {
        return Err(Error::shape(
            "loss",
            format!("{} outputs but {} targets", batch, target.len()),
        ));
    }
    let inv_b = T::one() / T::of(batch as f64);
    match (kind, target) {
        (LossKind::SquaredError, Targets::Regression(y)) => {
            let diff = output.sub(y)?;
            let half = T::of(0.5);
            let total: T = diff.data().iter().map(|&e| e * e).sum();
            Ok((half * total * inv_b, diff.scale(inv_b)))
        }
        (LossKind::CrossEntropy, Targets::Classes(labels)) => {
            let classes = output.rows();
            if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
                return Err(Error::InvalidLabel {
                    label: bad,
                    classes,
                });
            }
            let mut grad = DenseMatrix::zeros(classes, batch);
            let mut total = T::zero();
            for (j, &label) in labels.iter().enumerate() {
                let max = (0..classes)
                    .map(|i| output.get(i, j))
                    .fold(T::neg_infinity(), T::max);
                let norm: T = (0..classes).map(|i| (output.get(i, j) - max).exp()).sum();
                let log_norm = norm.ln() + max;
                total += log_norm - output.get(label, j);
                for i in 0..classes {
                    let p = (output.get(i, j) - log_norm).exp();
                    let onehot = if i == label { T::one() } else { T::zero() };
                    grad.set(i, j, (p - onehot) * inv_b);
                }
            }
            Ok((total * inv_b, grad))
        }
        (LossKind::SquaredError, Targets::Classes(_)) => Err(Error::shape(
            "loss",
            "squared error needs real-valued targets",
        )),
        (LossKind::CrossEntropy, Targets::Regression(_)) => Err(Error::Unlabeled),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGradients<T> {
    /// One entry per layer, in forward order.
    pub layers: Vec<AdapterGradients<T>>,
    /// Full gradient with respect to the network input (frozen and adapter paths).
    pub input_grad: DenseMatrix<T>,
}

pub fn backward<T: Scalar>(
    net: &AdaptedNetwork<T>,
    trace: &ForwardTrace<T>,
    v_final: &DenseMatrix<T>,
) -> Result<NetworkGradients<T>> {
    if trace.layers.len() != net.layers.len() {
        return Err(Error::StaleTrace(format!(
            "trace has {} layers, network has {}",
            trace.layers.len(),
            net.layers.len()
        )));
    }
    for (i, (layer, lt)) in net.layers.iter().zip(&trace.layers).enumerate() {
        if lt.input.rows() != layer.in_dim()
            || lt.pre_activation.rows() != layer.out_dim()
            || lt.projected.rows() != layer.adapter.rank()
        {
            return Err(Error::StaleTrace(format!("layer {i} dimensions drifted")));
        }
    }
    let last = &trace.layers[trace.layers.len() - 1];
    if v_final.shape() != last.pre_activation.shape() {
        return Err(Error::shape(
            "backward",
            format!(
                "output gradient is {}x{}, expected {}x{}",
                v_final.rows(),
                v_final.cols(),
                last.pre_activation.rows(),
                last.pre_activation.cols()
            ),
        ));
    }

    let mut grads = Vec::with_capacity(net.layers.len());
    let mut v = v_final.clone();
    for (layer, lt) in net.layers.iter().zip(&trace.layers).rev() {
        let act = layer.activation;
        let v_pre = if act == Activation::Identity {
            v
        } else {
            let deriv = lt.pre_activation.map(|z| act.derivative(z));
            v.hadamard(&deriv)?
        };
        let g = adapter_backward_projected(&layer.adapter, &lt.input, &lt.projected, &v_pre)?;
        let mut v_in = matmul_tn(&layer.w0, &v_pre)?;
        v_in.add_scaled(T::one(), &g.grad_x)?;
        grads.push(g);
        v = v_in;
    }
    grads.reverse();
    Ok(NetworkGradients {
        layers: grads,
        input_grad: v,
    })
}

/// `exp(loss)` for cross entropy, the loss itself for squared error.
pub fn perplexity_analog(loss: f64, kind: LossKind) -> f64 {
    match kind {
        LossKind::CrossEntropy => loss.exp(),
        LossKind::SquaredError => loss,
    }
}
