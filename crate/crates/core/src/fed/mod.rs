//! The federated protocol: local training, upload, server averaging and
//! broadcast.
//!
//! With [`AggregationStrategy::ShareAOnly`] a round is
//!
//! 1. every client trains its own `A_i` and `B_i` on its private shard,
//! 2. clients upload only `A_i`,
//! 3. the server broadcasts the mean `A_bar`,
//! 4. clients continue from `W0 + gamma B_i A_bar`.

mod client;
mod server;
mod simulation;

use serde::{Deserialize, Serialize};

use crate::optim::UpdateMask;

pub use client::{local_train, sample_batch, ClientState, LocalTrainReport};
pub use server::{aggregate, ClientUpload, LayerMatrices, ServerState};
pub use simulation::{
    client_partition, experiment_data, run_experiment, run_experiment_with, ExperimentOutcome,
    RoundResult, Simulation, Verdict,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationStrategy {
    /// Average `A` only; `B` stays local.
    ShareAOnly,
    /// Average both `A` and `B`.
    ShareBoth,
    /// `A` frozen at a common initial value; average `B`.
    FreezeA,
    /// Odd rounds train and average `A`, even rounds train and average `B`.
    Alternating,
}

impl AggregationStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            AggregationStrategy::ShareAOnly => "share_a_only",
            AggregationStrategy::ShareBoth => "share_both",
            AggregationStrategy::FreezeA => "freeze_a",
            AggregationStrategy::Alternating => "alternating",
        }
    }

    /// Matrices averaged at the end of round `round` (1-based).
    pub fn shared(&self, round: usize) -> UpdateMask {
        match self {
            AggregationStrategy::ShareAOnly => UpdateMask::ONLY_A,
            AggregationStrategy::ShareBoth => UpdateMask::BOTH,
            AggregationStrategy::FreezeA => UpdateMask::ONLY_B,
            AggregationStrategy::Alternating => {
                if round % 2 == 1 {
                    UpdateMask::ONLY_A
                } else {
                    UpdateMask::ONLY_B
                }
            }
        }
    }

    /// Matrices clients may change during round `round`.
    pub fn trainable(&self, round: usize) -> UpdateMask {
        match self {
            AggregationStrategy::ShareAOnly | AggregationStrategy::ShareBoth => UpdateMask::BOTH,
            AggregationStrategy::FreezeA => UpdateMask::ONLY_B,
            AggregationStrategy::Alternating => self.shared(round),
        }
    }
}
