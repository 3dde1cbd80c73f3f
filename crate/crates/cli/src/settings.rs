//! Experiment configuration from a TOML file plus command-line overrides.

use std::path::Path;

use anyhow::{Context, Result};
use clap::Args;
use fedlora::ExperimentConfig;
use serde::Serialize;

/// Every `ExperimentConfig` field as an optional flag. Unset flags leave
/// the file (or default) value alone.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct ConfigArgs {
    /// TOML file with any subset of the keys below.
    #[arg(long, value_name = "PATH")]
    #[serde(skip)]
    pub config: Option<std::path::PathBuf>,

    #[arg(long, alias = "run_id")]
    pub run_id: Option<String>,
    #[arg(long, alias = "n_clients")]
    pub n_clients: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// identity, tanh or relu
    #[arg(long)]
    pub activation: Option<String>,
    /// standard, rank_stabilized, federated, ablation_small, ablation_large or fixed
    #[arg(long)]
    pub rule: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, alias = "fixed_gamma")]
    pub fixed_gamma: Option<f64>,
    /// share_a_only, share_both, freeze_a or alternating
    #[arg(long)]
    pub strategy: Option<String>,
    /// sgd or adam
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, alias = "adam_beta1")]
    pub adam_beta1: Option<f64>,
    #[arg(long, alias = "adam_beta2")]
    pub adam_beta2: Option<f64>,
    #[arg(long, alias = "adam_eps")]
    pub adam_eps: Option<f64>,
    #[arg(long, alias = "weight_decay")]
    pub weight_decay: Option<f64>,
    #[arg(long, alias = "reset_optim", num_args = 0..=1, default_missing_value = "true")]
    pub reset_optim: Option<bool>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long, alias = "local_steps")]
    pub local_steps: Option<usize>,
    #[arg(long, alias = "batch_size")]
    pub batch_size: Option<usize>,
    /// regression or classification
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long, alias = "class_sep")]
    pub class_sep: Option<f64>,
    #[arg(long, alias = "noise_std")]
    pub noise_std: Option<f64>,
    #[arg(long, alias = "n_train")]
    pub n_train: Option<usize>,
    #[arg(long, alias = "n_val")]
    pub n_val: Option<usize>,
    /// iid or dirichlet
    #[arg(long)]
    pub partition: Option<String>,
    /// Dirichlet concentration.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, alias = "sigma_a")]
    pub sigma_a: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, alias = "divergence_threshold")]
    pub divergence_threshold: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub parallel: Option<bool>,
}

/// Merges `overrides` over the keys of `base` and validates the result.
pub fn resolve_str(base: &str, overrides: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut table: toml::Table = toml::from_str(base).context("config file is not valid TOML")?;
    let flags = toml::Table::try_from(overrides).context("cannot encode flag overrides")?;
    table.extend(flags);
    let config: ExperimentConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| anyhow::anyhow!("invalid configuration: {}", e.message()))?;
    config.validate().context("invalid configuration")?;
    Ok(config)
}

/// Reads `args.config` if given, then applies the remaining flags.
pub fn resolve(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let base = match &args.config {
        Some(path) => read_file(path)?,
        None => String::new(),
    };
    resolve_str(&base, args)
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))
}

/// The fully resolved configuration as TOML, each line prefixed with `# `
/// so it can head a log.
pub fn echo(config: &ExperimentConfig) -> String {
    let body = toml::to_string(config).expect("configuration always serializes");
    body.lines().map(|l| format!("# {l}\n")).collect()
}
