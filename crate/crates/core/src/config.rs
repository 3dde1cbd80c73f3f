//! Full description of one simulated run.

use serde::{Deserialize, Serialize};

use crate::adapter::{scaling_factor, ScalingRule};
use crate::error::{Error, Result};
use crate::fed::AggregationStrategy;
use crate::model::{Activation, LossKind};
use crate::optim::{AdamConfig, OptimizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleName {
    Standard,
    RankStabilized,
    Federated,
    AblationSmall,
    AblationLarge,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Iid,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub n_clients: usize,
    pub rank: usize,
    /// Hidden width, and output width for regression.
    pub d: usize,
    /// Input width.
    pub k: usize,
    pub layers: usize,
    /// Applied after every layer but the last.
    pub activation: Activation,
    pub rule: RuleName,
    pub alpha: f64,
    /// Only read when `rule = "fixed"`.
    pub fixed_gamma: f64,
    pub strategy: AggregationStrategy,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Drop optimizer moments after every aggregation.
    pub reset_optim: bool,
    pub rounds: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    pub task: TaskKind,
    pub classes: usize,
    pub class_sep: f64,
    pub noise_std: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub partition: PartitionKind,
    /// Dirichlet concentration.
    pub beta: f64,
    /// Initial std-dev of `A`; `1/sqrt(fan_in)` per layer when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_a: Option<f64>,
    pub seed: u64,
    pub divergence_threshold: f64,
    /// Train clients concurrently between aggregation barriers.
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_id: "run".to_string(),
            n_clients: 3,
            rank: 8,
            d: 64,
            k: 64,
            layers: 2,
            activation: Activation::Tanh,
            rule: RuleName::Federated,
            alpha: 8.0,
            fixed_gamma: 1.0,
            strategy: AggregationStrategy::ShareAOnly,
            optimizer: OptimizerKind::Sgd,
            lr: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            reset_optim: false,
            rounds: 50,
            local_steps: 10,
            batch_size: 16,
            task: TaskKind::Regression,
            classes: 10,
            class_sep: 3.0,
            noise_std: 0.1,
            n_train: 16384,
            n_val: 256,
            partition: PartitionKind::Iid,
            beta: 0.5,
            sigma_a: None,
            seed: 0,
            divergence_threshold: 1e6,
            parallel: false,
        }
    }
}

fn positive(field: &'static str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::config(field, "must be at least 1"));
    }
    Ok(())
}

fn positive_real(field: &'static str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::config(
            field,
            format!("must be a positive finite number, got {v}"),
        ));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn scaling_rule(&self) -> ScalingRule {
        match self.rule {
            RuleName::Standard => ScalingRule::Standard { alpha: self.alpha },
            RuleName::RankStabilized => ScalingRule::RankStabilized { alpha: self.alpha },
            RuleName::Federated => ScalingRule::Federated { alpha: self.alpha },
            RuleName::AblationSmall => ScalingRule::AblationSmall,
            RuleName::AblationLarge => ScalingRule::AblationLarge,
            RuleName::Fixed => ScalingRule::Fixed {
                value: self.fixed_gamma,
            },
        }
    }

    /// The frozen scaling factor for this run.
    pub fn gamma(&self) -> Result<f64> {
        scaling_factor(self.scaling_rule(), self.n_clients, self.rank)
    }

    pub fn loss_kind(&self) -> LossKind {
        match self.task {
            TaskKind::Regression => LossKind::SquaredError,
            TaskKind::Classification => LossKind::CrossEntropy,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.task {
            TaskKind::Regression => self.d,
            TaskKind::Classification => self.classes,
        }
    }

    /// `(in, out)` widths of every layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|l| {
                let fan_in = if l == 0 { self.k } else { self.d };
                let fan_out = if l + 1 == self.layers {
                    self.output_dim()
                } else {
                    self.d
                };
                (fan_in, fan_out)
            })
            .collect()
    }

    pub fn sigma_a_for(&self, fan_in: usize) -> f64 {
        self.sigma_a.unwrap_or(1.0 / (fan_in as f64).sqrt())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Human readable method label, e.g. `share_a_only/federated`.
    pub fn method(&self) -> String {
        format!("{}/{}", self.strategy.name(), self.scaling_rule().name())
    }

    pub fn validate(&self) -> Result<()> {
        positive("n_clients", self.n_clients)?;
        positive("rank", self.rank)?;
        positive("d", self.d)?;
        positive("k", self.k)?;
        positive("layers", self.layers)?;
        positive("batch_size", self.batch_size)?;
        positive("n_val", self.n_val)?;
        positive_real("lr", self.lr)?;
        positive_real("divergence_threshold", self.divergence_threshold)?;
        self.scaling_rule().validate()?;
        if self.n_train < self.n_clients {
            return Err(Error::config(
                "n_train",
                format!(
                    "{} samples cannot cover {} clients",
                    self.n_train, self.n_clients
                ),
            ));
        }
        if let Some(s) = self.sigma_a {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::config(
                    "sigma_a",
                    format!("must be non-negative, got {s}"),
                ));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std", "must be non-negative"));
        }
        if self.task == TaskKind::Classification {
            if self.classes < 2 {
                return Err(Error::config("classes", "need at least 2 classes"));
            }
            positive_real("class_sep", self.class_sep)?;
        }
        if self.partition == PartitionKind::Dirichlet {
            if self.task != TaskKind::Classification {
                return Err(Error::config(
                    "partition",
                    "dirichlet partitioning needs task = \"classification\"",
                ));
            }
            positive_real("beta", self.beta)?;
        }
        if self.optimizer == OptimizerKind::Adam {
            for (field, b) in [
                ("adam_beta1", self.adam_beta1),
                ("adam_beta2", self.adam_beta2),
            ] {
                if !(0.0..1.0).contains(&b) {
                    return Err(Error::config(field, format!("must lie in [0, 1), got {b}")));
                }
            }
            positive_real("adam_eps", self.adam_eps)?;
            if !(self.weight_decay >= 0.0) {
                return Err(Error::config("weight_decay", "must be non-negative"));
            }
        }
        Ok(())
    }
}
