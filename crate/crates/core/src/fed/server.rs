use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::scalar::Scalar;

use super::AggregationStrategy;

/// Per-layer matrices exchanged between clients and server.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMatrices<T> {
    pub a: Option<DenseMatrix<T>>,
    pub b: Option<DenseMatrix<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpload<T> {
    pub client_id: usize,
    pub layers: Vec<LayerMatrices<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState<T> {
    pub strategy: AggregationStrategy,
    /// Last completed round; 0 before any training.
    pub round: usize,
    pub broadcast: Vec<LayerMatrices<T>>,
}

impl<T: Scalar> ServerState<T> {
    pub fn new(strategy: AggregationStrategy, layers: usize) -> Self {
        Self {
            strategy,
            round: 0,
            broadcast: vec![LayerMatrices { a: None, b: None }; layers],
        }
    }
}

fn mean_of<T: Scalar>(
    mats: &[(usize, &DenseMatrix<T>)],
    what: &str,
    layer: usize,
) -> Result<DenseMatrix<T>> {
    let (_, first) = mats[0];
    let mut sum = DenseMatrix::zeros(first.rows(), first.cols());
    for &(id, m) in mats {
        sum.add_scaled(T::one(), m).map_err(|_| {
            Error::shape(
                "aggregate",
                format!(
                    "client {id} uploaded a {}x{} {what} for layer {layer}, expected {}x{}",
                    m.rows(),
                    m.cols(),
                    first.rows(),
                    first.cols()
                ),
            )
        })?;
    }
    Ok(sum.scale(T::one() / T::of(mats.len() as f64)))
}

/// Averages the uploads of round `server.round` into the broadcast buffer.
///
/// Uploads are reduced in ascending `client_id` order whatever order they
/// arrive in, and the divisor is the number of uploads.
pub fn aggregate<'s, T: Scalar>(
    server: &'s mut ServerState<T>,
    uploads: &[ClientUpload<T>],
) -> Result<&'s [LayerMatrices<T>]> {
    if uploads.is_empty() {
        return Err(Error::AllDiverged);
    }
    let mut ordered: Vec<&ClientUpload<T>> = uploads.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    if ordered.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::shape("aggregate", "duplicate client upload"));
    }
    let layers = server.broadcast.len();
    if let Some(u) = ordered.iter().find(|u| u.layers.len() != layers) {
        return Err(Error::shape(
            "aggregate",
            format!(
                "client {} uploaded {} layers, expected {layers}",
                u.client_id,
                u.layers.len()
            ),
        ));
    }
    let shared = server.strategy.shared(server.round);
    for layer in 0..layers {
        let collect = |pick: fn(&LayerMatrices<T>) -> Option<&DenseMatrix<T>>, what: &str| {
            ordered
                .iter()
                .map(|u| {
                    pick(&u.layers[layer])
                        .map(|m| (u.client_id, m))
                        .ok_or_else(|| {
                            Error::shape(
                                "aggregate",
                                format!(
                                    "client {} did not upload {what} for layer {layer}",
                                    u.client_id
                                ),
                            )
                        })
                })
                .collect::<Result<Vec<_>>>()
        };
        if shared.a {
            let mats = collect(|l| l.a.as_ref(), "A")?;
            server.broadcast[layer].a = Some(mean_of(&mats, "A", layer)?);
        }
        if shared.b {
            let mats = collect(|l| l.b.as_ref(), "B")?;
            server.broadcast[layer].b = Some(mean_of(&mats, "B", layer)?);
        }
    }
    Ok(&server.broadcast)
}
