use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, RngStream};
use crate::metrics::avg_grad_norm;
use crate::model::{backward, forward, loss, AdaptedNetwork};
use crate::optim::{apply_update, OptimizerState, UpdateMask};
use crate::scalar::Scalar;
use crate::tasks::Dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState<T> {
    pub id: usize,
    pub network: AdaptedNetwork<T>,
    /// One per layer.
    pub optimizers: Vec<OptimizerState<T>>,
    pub shard: Dataset<T>,
    pub diverged: bool,
}

impl<T: Scalar> ClientState<T> {
    pub fn a(&self, layer: usize) -> &DenseMatrix<T> {
        self.network.layers()[layer].adapter.a()
    }

    pub fn b(&self, layer: usize) -> &DenseMatrix<T> {
        self.network.layers()[layer].adapter.b()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LocalTrainReport {
    /// Training loss before each completed step.
    pub losses: Vec<f64>,
    /// Average gradient norm of the trainable matrices at each step.
    pub grad_norms: Vec<f64>,
}

/// Indices of one mini-batch: a uniform draw without replacement, or the
/// whole shard in order when it is not larger than the batch.
pub fn sample_batch(shard_len: usize, batch_size: usize, rng: &mut RngStream) -> Vec<usize> {
    if batch_size >= shard_len {
        return (0..shard_len).collect();
    }
    rand::seq::index::sample(rng, shard_len, batch_size).into_vec()
}

/// Runs `local_steps` mini-batch steps on the client's shard.
///
/// A non-finite loss, a loss whose magnitude exceeds `divergence_threshold`
/// or a non-finite gradient marks the client diverged and stops training.
/// Diverged clients are skipped.
pub fn local_train<T: Scalar>(
    client: &mut ClientState<T>,
    local_steps: usize,
    batch_size: usize,
    mask: UpdateMask,
    rng: &mut RngStream,
    divergence_threshold: f64,
) -> Result<LocalTrainReport> {
    let mut report = LocalTrainReport::default();
    if client.diverged {
        return Ok(report);
    }
    for _ in 0..local_steps {
        let idx = sample_batch(client.shard.len(), batch_size, rng);
        let (x, targets) = client.shard.batch(&idx)?;
        let (out, trace) = forward(&client.network, &x)?;
        let (l, v) = loss(&out, &targets, client.network.loss_kind)?;
        let l = l.as_f64();
        if !l.is_finite() || l.abs() > divergence_threshold {
            client.diverged = true;
            break;
        }
        let grads = backward(&client.network, &trace, &v)?;
        let trainable = grads.layers.iter().flat_map(|g| {
            let a = mask.a.then_some(&g.grad_a);
            let b = mask.b.then_some(&g.grad_b);
            a.into_iter().chain(b)
        });
        let norm = avg_grad_norm(trainable);
        report.losses.push(l);
        report.grad_norms.push(norm);
        for ((layer, opt), g) in client
            .network
            .layers_mut()
            .iter_mut()
            .zip(client.optimizers.iter_mut())
            .zip(&grads.layers)
        {
            match apply_update(opt, &mut layer.adapter, g, mask) {
                Ok(()) => {}
                Err(Error::NonFiniteGradient) => {
                    client.diverged = true;
                    return Ok(report);
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(report)
}
