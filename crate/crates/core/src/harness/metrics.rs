//! Metrics CSV files. Floats are written with 17 significant digits so every
//! value round-trips; unmeasured columns are empty.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sam::MetricsRecord;

pub fn metrics_header() -> String {
    MetricsRecord::FIELDS.join(",")
}

/// `x` with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

pub fn metrics_row(r: &MetricsRecord) -> String {
    [
        r.step.to_string(),
        fmt_opt(r.train_loss),
        fmt_opt(r.eval_loss),
        fmt_opt(r.eval_accuracy),
        fmt_opt(r.ascent_grad_norm),
        fmt_opt(r.adv_loss_gap),
        fmt_f64(r.step_wall_ms),
        r.skipped_ascent_count.to_string(),
    ]
    .join(",")
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = metrics_header();
    out.push('\n');
    for r in records {
        writeln!(out, "{}", metrics_row(r)).expect("writing to a String");
    }
    out
}

pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    fs::write(path, metrics_csv(records)).map_err(|e| Error::io(path, e))
}

fn parse_opt(field: &str, line: usize) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|_| Error::config(format!("metrics line {line}: bad number {field:?}")))
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == metrics_header() => {}
        other => {
            return Err(Error::config(format!(
                "unexpected metrics header {other:?}"
            )));
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != MetricsRecord::FIELDS.len() {
            return Err(Error::config(format!(
                "metrics line {n}: expected 8 fields, got {}",
                f.len()
            )));
        }
        let int = |s: &str| {
            s.parse::<u64>()
                .map_err(|_| Error::config(format!("metrics line {n}: bad integer {s:?}")))
        };
        out.push(MetricsRecord {
            step: int(f[0])?,
            train_loss: parse_opt(f[1], n)?,
            eval_loss: parse_opt(f[2], n)?,
            eval_accuracy: parse_opt(f[3], n)?,
            ascent_grad_norm: parse_opt(f[4], n)?,
            adv_loss_gap: parse_opt(f[5], n)?,
            step_wall_ms: parse_opt(f[6], n)?.unwrap_or(0.0),
            skipped_ascent_count: int(f[7])?,
        });
    }
    Ok(out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(&text)
}

/// The step and value of a best evaluation under one metric.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Best {
    pub step: u64,
    pub value: f64,
}

/// Highest `eval_accuracy`, earliest step on ties.
pub fn best_accuracy(records: &[MetricsRecord]) -> Option<Best> {
    records
        .iter()
        .fold(None, |best, r| match (r.eval_accuracy, best) {
            (Some(v), Some(b)) if v <= b.value => Some(b),
            (Some(v), _) => Some(Best {
                step: r.step,
                value: v,
            }),
            (None, b) => b,
        })
}

/// Lowest `eval_loss`, earliest step on ties.
pub fn best_loss(records: &[MetricsRecord]) -> Option<Best> {
    records
        .iter()
        .fold(None, |best, r| match (r.eval_loss, best) {
            (Some(v), Some(b)) if v >= b.value => Some(b),
            (Some(v), _) => Some(Best {
                step: r.step,
                value: v,
            }),
            (None, b) => b,
        })
}
