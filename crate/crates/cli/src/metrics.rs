//! CSV records: per-run training curves and per-ablation summaries.

use std::path::Path;

use anyhow::{bail, Context, Result};

pub const METRICS_HEADER: [&str; 8] =
    ["run_id", "iteration", "l_action", "l_align", "total_loss", "eval_success_rate", "probe_rmse", "wall_ms"];
pub const SUMMARY_HEADER: [&str; 5] = ["axis", "value", "final_success_rate", "iterations_to_threshold", "probe_rmse"];

/// `%g`-style formatting with 6 significant digits.
pub fn fmt_g6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: String| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-4..6).contains(&exp) {
        trim(format!("{v:.*}", (5 - exp) as usize))
    } else {
        format!("{}e{}{:02}", trim(mantissa.to_string()), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_g6).unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub iteration: usize,
    pub l_action: f64,
    pub l_align: Option<f64>,
    pub total_loss: f64,
    pub eval_success_rate: f64,
    pub probe_rmse: Option<f64>,
    pub wall_ms: Option<u64>,
}

impl MetricsRow {
    fn fields(&self) -> [String; 8] {
        [
            self.run_id.clone(),
            self.iteration.to_string(),
            fmt_g6(self.l_action),
            opt(self.l_align),
            fmt_g6(self.total_loss),
            fmt_g6(self.eval_success_rate),
            opt(self.probe_rmse),
            self.wall_ms.map(|w| w.to_string()).unwrap_or_default(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub axis: String,
    pub value: f64,
    pub final_success_rate: f64,
    pub iterations_to_threshold: Option<usize>,
    pub probe_rmse: Option<f64>,
}

impl SummaryRow {
    fn fields(&self) -> [String; 5] {
        [
            self.axis.clone(),
            fmt_g6(self.value),
            fmt_g6(self.final_success_rate),
            self.iterations_to_threshold.map(|i| i.to_string()).unwrap_or_default(),
            opt(self.probe_rmse),
        ]
    }
}

fn to_csv<const N: usize>(header: [&str; N], rows: impl Iterator<Item = [String; N]>) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Vec<u8> {
    to_csv(METRICS_HEADER, rows.iter().map(MetricsRow::fields))
}

pub fn summary_csv(rows: &[SummaryRow]) -> Vec<u8> {
    to_csv(SUMMARY_HEADER, rows.iter().map(SummaryRow::fields))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// A parsed CSV in either schema.
#[derive(Clone, Debug, PartialEq)]
pub enum Table {
    Metrics(Vec<MetricsRow>),
    Summary(Vec<SummaryRow>),
}

fn num(field: &str, line: usize, name: &str) -> Result<f64> {
    field.parse().with_context(|| format!("line {line}: {name} `{field}` is not a number"))
}

fn opt_num(field: &str, line: usize, name: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        Ok(None)
    } else {
        num(field, line, name).map(Some)
    }
}

pub fn parse_table(text: &str) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers().context("line 1: unreadable header")?.iter().map(str::to_string).collect();
    let is_metrics = header == METRICS_HEADER;
    if !is_metrics && header != SUMMARY_HEADER {
        bail!("line 1: header matches neither the metrics nor the summary schema");
    }
    let mut metrics = Vec::new();
    let mut summary = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            anyhow::anyhow!("line {line}: {e}")
        })?;
        let line = rec.position().map_or(0, |p| p.line()) as usize;
        let f = |i: usize| rec.get(i).unwrap_or("");
        if is_metrics {
            let iteration = f(1).parse().with_context(|| format!("line {line}: bad iteration `{}`", f(1)))?;
            let wall_ms = if f(7).is_empty() {
                None
            } else {
                Some(f(7).parse().with_context(|| format!("line {line}: bad wall_ms `{}`", f(7)))?)
            };
            metrics.push(MetricsRow {
                run_id: f(0).to_string(),
                iteration,
                l_action: num(f(2), line, "l_action")?,
                l_align: opt_num(f(3), line, "l_align")?,
                total_loss: num(f(4), line, "total_loss")?,
                eval_success_rate: num(f(5), line, "eval_success_rate")?,
                probe_rmse: opt_num(f(6), line, "probe_rmse")?,
                wall_ms,
            });
        } else {
            let iterations_to_threshold = if f(3).is_empty() {
                None
            } else {
                Some(f(3).parse().with_context(|| format!("line {line}: bad iterations_to_threshold `{}`", f(3)))?)
            };
            summary.push(SummaryRow {
                axis: f(0).to_string(),
                value: num(f(1), line, "value")?,
                final_success_rate: num(f(2), line, "final_success_rate")?,
                iterations_to_threshold,
                probe_rmse: opt_num(f(4), line, "probe_rmse")?,
            });
        }
    }
    if metrics.is_empty() && summary.is_empty() {
        bail!("no rows");
    }
    Ok(if is_metrics { Table::Metrics(metrics) } else { Table::Summary(summary) })
}
