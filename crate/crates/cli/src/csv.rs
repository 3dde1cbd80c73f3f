//! Metrics files: comma separated, header row, reals with 9 significant
//! digits independent of locale.

use std::io::{self, Write};

use fedlora::metrics::MetricsRecord;
use fedlora::ExperimentConfig;

/// Formats like C's `%.9g`: fixed notation for exponents in `[-4, 9)`,
/// scientific otherwise, trailing zeros dropped. `NaN`, `inf`, `-inf` for
/// non-finite values.
pub fn format_real(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific notation");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!(
            "{}e{sign}{:02}",
            trim_zeros(mantissa.to_string()),
            exp.abs()
        )
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn header(layers: usize, swept: bool) -> String {
    let mut cols: Vec<String> = [
        "run_id",
        "method",
        "rule",
        "strategy",
        "rank",
        "n_clients",
        "seed",
        "round",
        "mean_loss",
        "ppl_analog",
        "avg_grad_norm",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    cols.extend((0..layers).map(|l| format!("act_mean_l{l}")));
    cols.extend((0..layers).map(|l| format!("act_var_l{l}")));
    cols.push("diverged_count".into());
    if swept {
        cols.push("swept_value".into());
    }
    cols.join(",")
}

pub fn row(config: &ExperimentConfig, record: &MetricsRecord, swept: Option<usize>) -> String {
    let mut cols = vec![
        config.run_id.clone(),
        config.method(),
        config.scaling_rule().name().to_string(),
        config.strategy.name().to_string(),
        config.rank.to_string(),
        config.n_clients.to_string(),
        config.seed.to_string(),
        record.round.to_string(),
        format_real(record.mean_loss),
        format_real(record.ppl_analog),
        record.avg_grad_norm.map(format_real).unwrap_or_default(),
    ];
    cols.extend(record.act_mean.iter().map(|&m| format_real(m)));
    cols.extend(record.act_var.iter().map(|&v| format_real(v)));
    cols.push(record.diverged_count.to_string());
    if let Some(v) = swept {
        cols.push(v.to_string());
    }
    cols.join(",")
}

/// Writes a header then one flushed line per record, so an interrupted run
/// leaves a valid prefix.
pub struct MetricsWriter<W: Write> {
    out: W,
    swept: bool,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W, layers: usize, swept: bool) -> io::Result<Self> {
        writeln!(out, "{}", header(layers, swept))?;
        out.flush()?;
        Ok(Self { out, swept })
    }

    pub fn write(
        &mut self,
        config: &ExperimentConfig,
        record: &MetricsRecord,
        swept: Option<usize>,
    ) -> io::Result<()> {
        debug_assert_eq!(self.swept, swept.is_some());
        writeln!(self.out, "{}", row(config, record, swept))?;
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
