//! Counter-based random streams keyed by `(master_seed, entity, index, round)`.
//!
//! Every stream is a ChaCha8 keystream whose 256-bit key is the little-endian
//! concatenation of the master seed, the entity tag and the two indices. Two
//! streams with different identifiers therefore never share key material, and
//! any stream can be rebuilt from its identifier alone, independently of
//! scheduling order.
//!
//! Gaussian draws use the ziggurat sampler of `rand_distr::StandardNormal`
//! applied to this keystream, scaled by the requested standard deviation.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::DenseMatrix;
use crate::scalar::Scalar;

/// What a random stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EntityKind {
    /// Frozen base weights; index = layer.
    BaseWeights,
    /// Ground-truth map of the synthetic task.
    Teacher,
    TrainData,
    ValidationData,
    Partition,
    /// Per-client adapter initialisation; index = client, round = layer.
    AdapterInit,
    /// Server-side shared initialisation; round = layer.
    ServerInit,
    /// Mini-batch sampling; index = client, round = communication round.
    Batch,
    MomentCheck,
    /// Free for tests and oracle fixtures.
    Test,
}

impl EntityKind {
    fn tag(self) -> u64 {
        match self {
            EntityKind::BaseWeights => 1,
            EntityKind::Teacher => 2,
            EntityKind::TrainData => 3,
            EntityKind::ValidationData => 4,
            EntityKind::Partition => 5,
            EntityKind::AdapterInit => 6,
            EntityKind::ServerInit => 7,
            EntityKind::Batch => 8,
            EntityKind::MomentCheck => 9,
            EntityKind::Test => 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub kind: EntityKind,
    pub index: u64,
    pub round: u64,
}

/// A deterministic random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    master_seed: u64,
    id: StreamId,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, kind: EntityKind, index: u64, round: u64) -> Self {
        Self::from_id(master_seed, StreamId { kind, index, round })
    }

    pub fn from_id(master_seed: u64, id: StreamId) -> Self {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&master_seed.to_le_bytes());
        key[8..16].copy_from_slice(&id.kind.tag().to_le_bytes());
        key[16..24].copy_from_slice(&id.index.to_le_bytes());
        key[24..32].copy_from_slice(&id.round.to_le_bytes());
        Self {
            master_seed,
            id,
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn id(&self) -> StreamId {
        self.id
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits.
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Matrix of i.i.d. `N(0, sigma^2)` entries drawn in row-major order.
pub fn gaussian_matrix<T: Scalar>(
    rows: usize,
    cols: usize,
    sigma: f64,
    rng: &mut RngStream,
) -> DenseMatrix<T> {
    assert!(sigma >= 0.0, "standard deviation must be non-negative");
    if sigma == 0.0 {
        return DenseMatrix::zeros(rows, cols);
    }
    DenseMatrix::from_fn(rows, cols, |_, _| T::of(sigma * rng.standard_normal()))
}
