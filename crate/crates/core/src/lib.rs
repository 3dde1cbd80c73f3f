//! Federated low-rank adaptation simulator.
//!
//! Clients fine-tune `h = W0 x + gamma B A x` adapters on private shards and
//! a server averages only the `A` factors. The scaling factor `gamma` is
//! chosen by a pluggable rule, one of which, `alpha * sqrt(N / r)`, keeps
//! gradient magnitudes independent of both rank and client count.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix it to `f64`, which is what the oracles
//! need.

pub mod adapter;
pub mod config;
mod error;
pub mod fed;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod optim;
mod scalar;
pub mod tasks;

pub use adapter::{scaling_factor, ScalingRule};
pub use config::{ExperimentConfig, PartitionKind, RuleName, TaskKind};
pub use error::{Error, Result};
pub use fed::{AggregationStrategy, Verdict};
pub use scalar::Scalar;

pub type Matrix = linalg::DenseMatrix<f64>;
pub type Matrix32 = linalg::DenseMatrix<f32>;
pub type Adapter = adapter::LoraAdapter<f64>;
pub type Network = model::AdaptedNetwork<f64>;
pub type Dataset = tasks::Dataset<f64>;
pub type Client = fed::ClientState<f64>;
pub type Simulation = fed::Simulation<f64>;
