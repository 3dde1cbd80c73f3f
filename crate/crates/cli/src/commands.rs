use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use fedlora::fed::{client_partition, experiment_data, run_experiment_with};
use fedlora::metrics::{stability_sweep, StabilityReport, SweepAxis};
use fedlora::{ExperimentConfig, Verdict};

use crate::check::{self, Fault};
use crate::csv::{format_real, MetricsWriter};
use crate::dump::write_dataset;
use crate::settings::{echo, resolve, ConfigArgs};

pub const EXIT_OK: u8 = 0;
pub const EXIT_IO: u8 = 1;
pub const EXIT_DIVERGED: u8 = 2;
pub const EXIT_ORACLE: u8 = 3;

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Metrics file; defaults to `<run_id>.csv`.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Rank,
    Clients,
}

impl From<Axis> for SweepAxis {
    fn from(a: Axis) -> Self {
        match a {
            Axis::Rank => SweepAxis::Rank,
            Axis::Clients => SweepAxis::Clients,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Strictly increasing, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<usize>,
    /// Per-round metrics of every swept run; defaults to `<run_id>_sweep.csv`.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// One-row summary; defaults to `<out>` with a `_summary` suffix.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CheckArgs {
    /// Number of random instances per gradient check.
    #[arg(long, default_value_t = 100)]
    pub instances: u64,
    #[arg(long, value_enum, hide = true)]
    pub inject_fault: Option<Fault>,
}

#[derive(Debug, Clone, Args)]
pub struct DumpArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Destination; standard output when absent.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn resolved(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let config = resolve(args)?;
    eprint!("{}", echo(&config));
    Ok(config)
}

pub fn cmd_run(args: &RunArgs) -> Result<u8> {
    let config = resolved(&args.config)?;
    let path = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.csv", config.run_id)));
    let mut writer = MetricsWriter::new(create(&path)?, config.layers, false)
        .with_context(|| format!("cannot write {}", path.display()))?;
    let outcome = run_experiment_with::<f64, anyhow::Error>(&config, |r| {
        writer
            .write(&config, &r.record, None)
            .with_context(|| format!("cannot write {}", path.display()))
    })?;
    eprintln!(
        "verdict: {} after {} rounds, final loss {}",
        outcome.verdict.name(),
        outcome.rounds.len() - 1,
        format_real(outcome.final_loss())
    );
    Ok(if outcome.verdict == Verdict::Diverged {
        EXIT_DIVERGED
    } else {
        EXIT_OK
    })
}

pub fn summary_header() -> &'static str {
    "run_id,method,rule,strategy,axis,values,round1_grad_norms,final_losses,flatness_ratio,slope"
}

pub fn summary_row(config: &ExperimentConfig, report: &StabilityReport) -> String {
    let join = |xs: Vec<String>| xs.join(";");
    [
        config.run_id.clone(),
        config.method(),
        config.scaling_rule().name().to_string(),
        config.strategy.name().to_string(),
        report.axis.name().to_string(),
        join(report.values().iter().map(usize::to_string).collect()),
        join(report.round1_norms().into_iter().map(format_real).collect()),
        join(
            report
                .points
                .iter()
                .map(|p| format_real(p.final_loss))
                .collect(),
        ),
        format_real(report.flatness_ratio),
        format_real(report.slope),
    ]
    .join(",")
}

fn summary_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("sweep");
    out.with_file_name(format!("{stem}_summary.csv"))
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<u8> {
    let config = resolved(&args.config)?;
    if args.values.is_empty() {
        bail!("--values needs at least one value");
    }
    let axis: SweepAxis = args.axis.into();
    let report = stability_sweep::<f64>(&config, axis, &args.values)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}_sweep.csv", config.run_id)));
    let mut writer = MetricsWriter::new(create(&out)?, config.layers, true)?;
    for p in &report.points {
        let run_config = axis.apply(&config, p.value);
        for r in p.outcome.records() {
            writer.write(&run_config, r, Some(p.value))?;
        }
    }
    let summary = args.summary.clone().unwrap_or_else(|| summary_path(&out));
    let mut s = create(&summary)?;
    writeln!(s, "{}", summary_header())?;
    writeln!(s, "{}", summary_row(&config, &report))?;
    s.flush()?;
    println!(
        "{} sweep over {:?}: flatness ratio {}, log-log slope {}",
        axis.name(),
        report.values(),
        format_real(report.flatness_ratio),
        format_real(report.slope)
    );
    for p in &report.points {
        println!(
            "  {}={:<6} round-1 grad norm {:<14} final loss {:<14} {}",
            axis.name(),
            p.value,
            format_real(p.round1_grad_norm),
            format_real(p.final_loss),
            p.verdict().name()
        );
    }
    Ok(EXIT_OK)
}

pub fn cmd_check(args: &CheckArgs, out: &mut impl Write) -> Result<u8> {
    let suites = check::run_all(args.instances, args.inject_fault);
    writeln!(
        out,
        "{:<6} {:<18} {:>6}  detail",
        "status", "suite", "cases"
    )?;
    for s in &suites {
        let status = if s.passed { "PASS" } else { "FAIL" };
        writeln!(
            out,
            "{status:<6} {:<18} {:>6}  {}",
            s.name, s.cases, s.detail
        )?;
    }
    match suites.iter().find(|s| !s.passed) {
        Some(first) => {
            writeln!(out, "first failure in {}: {}", first.name, first.detail)?;
            Ok(EXIT_ORACLE)
        }
        None => Ok(EXIT_OK),
    }
}

pub fn cmd_partition_dump(args: &DumpArgs) -> Result<u8> {
    let config = resolved(&args.config)?;
    let (train, _) = experiment_data::<f64>(&config)?;
    let partition = client_partition(&config, &train)?;
    match &args.out {
        Some(path) => {
            let mut w = create(path)?;
            write_dataset(&mut w, &train, &partition)?;
            w.flush()?;
        }
        None => {
            let stdout = io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            write_dataset(&mut w, &train, &partition)?;
            w.flush()?;
        }
    }
    eprintln!("client sizes: {:?}", partition.sizes());
    Ok(EXIT_OK)
}
