use std::sync::Arc;

use rayon::prelude::*;

use crate::adapter::init_adapter;
use crate::config::{ExperimentConfig, PartitionKind, TaskKind};
use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, DenseMatrix, EntityKind, RngStream};
use crate::metrics::{activation_moments, MetricsRecord};
use crate::model::{forward, loss, perplexity_analog, Activation, AdaptedLayer, AdaptedNetwork};
use crate::optim::OptimizerState;
use crate::scalar::Scalar;
use crate::tasks::{
    make_classification, make_regression, partition_dirichlet, partition_iid, Dataset, Partition,
};

use super::client::{local_train, ClientState, LocalTrainReport};
use super::server::{aggregate, ClientUpload, LayerMatrices, ServerState};

#[derive(Debug, Clone, PartialEq)]
pub struct RoundResult {
    pub round: usize,
    /// Mean training loss over each client's local steps; `None` for clients
    /// that took no step. Always one entry per client.
    pub client_losses: Vec<Option<f64>>,
    pub record: MetricsRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verdict {
    Converged,
    Diverged,
    Stagnant,
}

impl Verdict {
    pub fn name(&self) -> &'static str {
        match self {
            Verdict::Converged => "converged",
            Verdict::Diverged => "diverged",
            Verdict::Stagnant => "stagnant",
        }
    }

    /// Classifies a finished run from its per-round validation losses.
    ///
    /// Diverged if any loss is non-finite or exceeds `threshold` in
    /// magnitude, or any client diverged. Otherwise stagnant if the final
    /// loss is above 90% of the loss after round 5 (round 0 for runs of at
    /// most 5 rounds), converged otherwise.
    pub fn classify(records: &[MetricsRecord], threshold: f64) -> Verdict {
        let bad = |r: &MetricsRecord| {
            !r.mean_loss.is_finite() || r.mean_loss.abs() > threshold || r.diverged_count > 0
        };
        if records.is_empty() || records.iter().any(bad) {
            return Verdict::Diverged;
        }
        let last = records.len() - 1;
        let reference = if last > 5 { 5 } else { 0 };
        if records[last].mean_loss > 0.9 * records[reference].mean_loss {
            Verdict::Stagnant
        } else {
            Verdict::Converged
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub gamma: f64,
    /// Round 0 (evaluation only) followed by one entry per trained round.
    pub rounds: Vec<RoundResult>,
    pub verdict: Verdict,
}

impl ExperimentOutcome {
    pub fn records(&self) -> impl Iterator<Item = &MetricsRecord> {
        self.rounds.iter().map(|r| &r.record)
    }

    pub fn final_loss(&self) -> f64 {
        self.rounds.last().map_or(f64::NAN, |r| r.record.mean_loss)
    }
}

/// A running federated system: clients, server and the shared validation set.
#[derive(Debug, Clone)]
pub struct Simulation<T> {
    config: ExperimentConfig,
    gamma: f64,
    clients: Vec<ClientState<T>>,
    server: ServerState<T>,
    validation: Dataset<T>,
}

/// The run's training and validation sets, drawn from one stream so they
/// share the same ground truth.
pub fn experiment_data<T: Scalar>(cfg: &ExperimentConfig) -> Result<(Dataset<T>, Dataset<T>)> {
    let n = cfg.n_train + cfg.n_val;
    let mut rng = RngStream::new(cfg.seed, EntityKind::TrainData, 0, 0);
    let all = match cfg.task {
        TaskKind::Regression => make_regression(n, cfg.k, cfg.d, cfg.noise_std, &mut rng)?,
        TaskKind::Classification => {
            make_classification(n, cfg.k, cfg.classes, cfg.class_sep, &mut rng)?
        }
    };
    all.split_at(cfg.n_train)
}

/// How the training set is spread over the run's clients.
pub fn client_partition<T: Scalar>(
    cfg: &ExperimentConfig,
    train: &Dataset<T>,
) -> Result<Partition> {
    let mut rng = RngStream::new(cfg.seed, EntityKind::Partition, 0, 0);
    match cfg.partition {
        PartitionKind::Iid => partition_iid(train.len(), cfg.n_clients, &mut rng),
        PartitionKind::Dirichlet => partition_dirichlet(train, cfg.n_clients, cfg.beta, &mut rng),
    }
}

impl<T: Scalar> Simulation<T> {
    /// Builds data, partition, frozen base weights and per-client adapters.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let gamma = config.gamma()?;
        let (train, validation) = experiment_data::<T>(&config)?;
        let partition = client_partition(&config, &train)?;

        let dims = config.layer_dims();
        let base: Vec<Arc<DenseMatrix<T>>> = dims
            .iter()
            .enumerate()
            .map(|(l, &(fan_in, fan_out))| {
                let mut rng = RngStream::new(config.seed, EntityKind::BaseWeights, l as u64, 0);
                Arc::new(gaussian_matrix(
                    fan_out,
                    fan_in,
                    1.0 / (fan_in as f64).sqrt(),
                    &mut rng,
                ))
            })
            .collect();

        let mut clients = Vec::with_capacity(config.n_clients);
        for (id, shard) in partition.shards.iter().enumerate() {
            let mut layers = Vec::with_capacity(dims.len());
            for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
                let sigma = config.sigma_a_for(fan_in);
                let mut rng = match config.strategy {
                    super::AggregationStrategy::FreezeA => {
                        RngStream::new(config.seed, EntityKind::ServerInit, 0, l as u64)
                    }
                    _ => RngStream::new(config.seed, EntityKind::AdapterInit, id as u64, l as u64),
                };
                let adapter = init_adapter(fan_out, fan_in, config.rank, sigma, &mut rng)
                    .with_gamma(T::of(gamma));
                let activation = if l + 1 == dims.len() {
                    Activation::Identity
                } else {
                    config.activation
                };
                layers.push(AdaptedLayer::new(base[l].clone(), adapter, activation)?);
            }
            let network = AdaptedNetwork::new(layers, config.loss_kind())?;
            let optimizers = (0..dims.len())
                .map(|_| OptimizerState::new(config.optimizer, config.lr, config.adam()))
                .collect();
            clients.push(ClientState {
                id,
                network,
                optimizers,
                shard: train.subset(shard)?,
                diverged: false,
            });
        }
        Self::from_parts(config, clients, validation)
    }

    /// Assembles a system from prepared clients, e.g. with hand-built shards.
    /// Client ids must be `0..N` in order.
    pub fn from_parts(
        config: ExperimentConfig,
        clients: Vec<ClientState<T>>,
        validation: Dataset<T>,
    ) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::NoClients);
        }
        if clients.iter().enumerate().any(|(i, c)| c.id != i) {
            return Err(Error::config("clients", "ids must be 0..N in order"));
        }
        let gamma = config.gamma()?;
        let layers = clients[0].network.layers().len();
        Ok(Self {
            server: ServerState::new(config.strategy, layers),
            config,
            gamma,
            clients,
            validation,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn clients(&self) -> &[ClientState<T>] {
        &self.clients
    }

    pub fn server(&self) -> &ServerState<T> {
        &self.server
    }

    pub fn validation(&self) -> &Dataset<T> {
        &self.validation
    }

    /// Last completed round.
    pub fn round(&self) -> usize {
        self.server.round
    }

    /// Validation metrics of the first non-diverged client's network, which
    /// after aggregation combines its own `B` with the broadcast `A`.
    pub fn evaluate(&self, avg_grad_norm: Option<f64>) -> Result<MetricsRecord> {
        let diverged_count = self.clients.iter().filter(|c| c.diverged).count();
        let layers = self.clients[0].network.layers().len();
        let Some(probe) = self.clients.iter().find(|c| !c.diverged) else {
            return Ok(MetricsRecord {
                round: self.server.round,
                mean_loss: f64::NAN,
                ppl_analog: f64::NAN,
                avg_grad_norm,
                act_mean: vec![f64::NAN; layers],
                act_var: vec![f64::NAN; layers],
                diverged_count,
            });
        };
        let all: Vec<usize> = (0..self.validation.len()).collect();
        let (x, targets) = self.validation.batch(&all)?;
        let (out, trace) = forward(&probe.network, &x)?;
        let (l, _) = loss(&out, &targets, probe.network.loss_kind)?;
        let l = l.as_f64();
        let (act_mean, act_var) = activation_moments(&trace).into_iter().unzip();
        Ok(MetricsRecord {
            round: self.server.round,
            mean_loss: l,
            ppl_analog: perplexity_analog(l, probe.network.loss_kind),
            avg_grad_norm,
            act_mean,
            act_var,
            diverged_count,
        })
    }

    /// One protocol round: local training, upload, aggregation, broadcast,
    /// evaluation.
    pub fn run_round(&mut self) -> Result<RoundResult> {
        let round = self.server.round + 1;
        let strategy = self.config.strategy;
        let mask = strategy.trainable(round);
        let (steps, batch, seed, threshold) = (
            self.config.local_steps,
            self.config.batch_size,
            self.config.seed,
            self.config.divergence_threshold,
        );
        let train = |c: &mut ClientState<T>| {
            let mut rng = RngStream::new(seed, EntityKind::Batch, c.id as u64, round as u64);
            local_train(c, steps, batch, mask, &mut rng, threshold)
        };
        let reports: Vec<LocalTrainReport> = if self.config.parallel {
            self.clients
                .par_iter_mut()
                .map(train)
                .collect::<Result<_>>()?
        } else {
            self.clients.iter_mut().map(train).collect::<Result<_>>()?
        };

        self.server.round = round;
        let shared = strategy.shared(round);
        let uploads: Vec<ClientUpload<T>> = self
            .clients
            .iter()
            .filter(|c| !c.diverged)
            .map(|c| ClientUpload {
                client_id: c.id,
                layers: c
                    .network
                    .layers()
                    .iter()
                    .map(|l| LayerMatrices {
                        a: shared.a.then(|| l.adapter.a().clone()),
                        b: shared.b.then(|| l.adapter.b().clone()),
                    })
                    .collect(),
            })
            .collect();
        if !uploads.is_empty() {
            let broadcast = aggregate(&mut self.server, &uploads)?.to_vec();
            for c in self.clients.iter_mut().filter(|c| !c.diverged) {
                for (layer, m) in c.network.layers_mut().iter_mut().zip(&broadcast) {
                    if shared.a {
                        if let Some(a) = &m.a {
                            layer.adapter.set_a(a.clone())?;
                        }
                    }
                    if shared.b {
                        if let Some(b) = &m.b {
                            layer.adapter.set_b(b.clone())?;
                        }
                    }
                }
                if self.config.reset_optim {
                    c.optimizers.iter_mut().for_each(OptimizerState::reset);
                }
            }
        }

        let client_losses = reports.iter().map(|r| mean(&r.losses)).collect();
        let norms: Vec<f64> = reports.iter().filter_map(|r| mean(&r.grad_norms)).collect();
        let record = self.evaluate(mean(&norms))?;
        Ok(RoundResult {
            round,
            client_losses,
            record,
        })
    }

    pub fn all_diverged(&self) -> bool {
        self.clients.iter().all(|c| c.diverged)
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Runs the configured number of rounds, stopping early only when every
/// client has diverged. `on_round` sees each result as soon as it exists.
pub fn run_experiment_with<T: Scalar, E: From<Error>>(
    config: &ExperimentConfig,
    mut on_round: impl FnMut(&RoundResult) -> std::result::Result<(), E>,
) -> std::result::Result<ExperimentOutcome, E> {
    let mut sim = Simulation::<T>::new(config.clone())?;
    let initial = RoundResult {
        round: 0,
        client_losses: vec![None; config.n_clients],
        record: sim.evaluate(None)?,
    };
    on_round(&initial)?;
    let mut rounds = vec![initial];
    for _ in 0..config.rounds {
        let result = sim.run_round()?;
        on_round(&result)?;
        rounds.push(result);
        if sim.all_diverged() {
            break;
        }
    }
    let records: Vec<MetricsRecord> = rounds.iter().map(|r| r.record.clone()).collect();
    Ok(ExperimentOutcome {
        gamma: sim.gamma(),
        verdict: Verdict::classify(&records, config.divergence_threshold),
        rounds,
    })
}

pub fn run_experiment<T: Scalar>(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    run_experiment_with::<T, Error>(config, |_| Ok(()))
}
