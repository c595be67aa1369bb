use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::metrics::fmt_f64;
use super::run::run_experiment;
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::tasks::SubsampleSpec;

pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_HEADER: &str =
    "axis,value,seed,sam,best_eval_accuracy,best_step,best_eval_loss,final_eval_accuracy,mean_step_wall_ms,status";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Rho,
    Ascent,
    M,
    Subsample,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rho" => Ok(SweepAxis::Rho),
            "ascent" | "ascent_size" => Ok(SweepAxis::Ascent),
            "m" => Ok(SweepAxis::M),
            "subsample" | "subsample_rate" => Ok(SweepAxis::Subsample),
            other => Err(Error::config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

impl SweepAxis {
    /// Column value written to the `axis` field.
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Rho => "rho",
            SweepAxis::Ascent => "ascent_size",
            SweepAxis::M => "m",
            SweepAxis::Subsample => "subsample_rate",
        }
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepAxis::Rho => vec![0.02, 0.05, 0.1, 0.15, 0.2, 0.3],
            SweepAxis::Ascent => vec![8.0, 24.0, 32.0, 64.0, 128.0],
            SweepAxis::M => vec![1.0, 2.0, 4.0],
            SweepAxis::Subsample => vec![0.02, 0.05, 0.1, 0.2, 0.4, 0.8],
        }
    }

    /// Whether baseline runs depend on the axis value (only subsampling
    /// changes what the baseline sees).
    pub fn baseline_per_value(self) -> bool {
        self == SweepAxis::Subsample
    }

    /// `base` with the axis set to `value` and `run_seed = seed`.
    pub fn apply(self, base: &ExperimentConfig, value: f64, seed: u64) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        cfg.run_seed = seed;
        let count = |v: f64| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::config(format!(
                    "{} values must be positive integers, got {v}",
                    self.name()
                )))
            }
        };
        match self {
            SweepAxis::Rho => cfg.sam.rho = value,
            SweepAxis::Ascent => cfg.sam.ascent_size = Some(count(value)?),
            SweepAxis::M => cfg.sam.m = count(value)?,
            SweepAxis::Subsample => cfg.subsample = Some(SubsampleSpec { rate: value, seed }),
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    /// Axis value, or `None` for a baseline shared across values.
    pub value: Option<f64>,
    pub seed: u64,
    pub sam: bool,
    pub best_eval_accuracy: Option<f64>,
    pub best_step: Option<u64>,
    pub best_eval_loss: Option<f64>,
    pub final_eval_accuracy: Option<f64>,
    pub mean_step_wall_ms: Option<f64>,
    pub status: String,
}

impl SweepRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    fn csv(&self) -> String {
        let f = |x: Option<f64>| x.map(fmt_f64).unwrap_or_default();
        let status: String = self
            .status
            .chars()
            .map(|c| if c == ',' || c == '\n' { ';' } else { c })
            .collect();
        [
            self.axis.clone(),
            self.value
                .map_or_else(|| "none".to_string(), |v| v.to_string()),
            self.seed.to_string(),
            self.sam.to_string(),
            f(self.best_eval_accuracy),
            self.best_step.map(|s| s.to_string()).unwrap_or_default(),
            f(self.best_eval_loss),
            f(self.final_eval_accuracy),
            f(self.mean_step_wall_ms),
            status,
        ]
        .join(",")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SWEEP_HEADER}\n");
        for r in &self.rows {
            writeln!(out, "{}", r.csv()).expect("writing to a String");
        }
        out
    }

    /// Successful rows for `value` (`None` selects shared baselines).
    pub fn cells(&self, value: Option<f64>, sam: bool) -> impl Iterator<Item = &SweepRow> {
        self.rows
            .iter()
            .filter(move |r| r.value == value && r.sam == sam && r.is_ok())
    }

    /// Mean best evaluation accuracy over seeds.
    pub fn mean_best_accuracy(&self, value: Option<f64>, sam: bool) -> Option<f64> {
        let accs: Vec<f64> = self
            .cells(value, sam)
            .filter_map(|r| r.best_eval_accuracy)
            .collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }

    /// Mean baseline accuracy that `value` is compared against.
    pub fn baseline_accuracy(&self, value: f64) -> Option<f64> {
        if self.axis.baseline_per_value() {
            self.mean_best_accuracy(Some(value), false)
        } else {
            self.mean_best_accuracy(None, false)
        }
    }
}

struct Cell {
    value: Option<f64>,
    seed: u64,
    sam: bool,
    config: ExperimentConfig,
}

fn cell_dir(
    root: &Path,
    axis: SweepAxis,
    value: Option<f64>,
    seed: u64,
    sam: bool,
) -> std::path::PathBuf {
    let v = value.map_or_else(|| "none".to_string(), |v| v.to_string());
    root.join(format!("{}={v}", axis.name()))
        .join(format!("seed={seed}"))
        .join(if sam { "sam" } else { "baseline" })
}

/// Runs one experiment per (value, seed) with SAM, plus baselines with SAM
/// disabled, and writes `sweep.csv` under the base `output_dir`. Rows are
/// ordered by value (shared baselines first), then seed, baseline before
/// SAM. A failing cell is recorded in its `status` column and the sweep
/// continues; invalid axis values fail before anything runs.
pub fn sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
    include_baseline: bool,
    exec: Exec,
) -> Result<SweepResult> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::config(
            "a sweep needs at least one value and one seed",
        ));
    }
    let mut values = values.to_vec();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut seeds = seeds.to_vec();
    seeds.sort_unstable();
    seeds.dedup();
    let root = base.output_dir.clone();

    let mut cells = Vec::new();
    if include_baseline && !axis.baseline_per_value() {
        for &seed in &seeds {
            let mut config = base.clone();
            config.run_seed = seed;
            config.sam.enabled = false;
            config.validate()?;
            config.output_dir = cell_dir(&root, axis, None, seed, false);
            cells.push(Cell {
                value: None,
                seed,
                sam: false,
                config,
            });
        }
    }
    for &value in &values {
        for &seed in &seeds {
            let cfg = axis.apply(base, value, seed)?;
            if include_baseline && axis.baseline_per_value() {
                let mut config = cfg.clone();
                config.sam.enabled = false;
                config.output_dir = cell_dir(&root, axis, Some(value), seed, false);
                cells.push(Cell {
                    value: Some(value),
                    seed,
                    sam: false,
                    config,
                });
            }
            let mut config = cfg;
            config.output_dir = cell_dir(&root, axis, Some(value), seed, true);
            cells.push(Cell {
                value: Some(value),
                seed,
                sam: true,
                config,
            });
        }
    }

    let rows = par::map_indexed(exec, cells.len(), |i| {
        let cell = &cells[i];
        let mut row = SweepRow {
            axis: axis.name().to_string(),
            value: cell.value,
            seed: cell.seed,
            sam: cell.sam,
            best_eval_accuracy: None,
            best_step: None,
            best_eval_loss: None,
            final_eval_accuracy: None,
            mean_step_wall_ms: None,
            status: "ok".to_string(),
        };
        match run_experiment(&cell.config) {
            Ok(run) => {
                let s = run.summary;
                row.best_eval_accuracy = s.best_accuracy.map(|b| b.value);
                row.best_step = s.best_accuracy.map(|b| b.step);
                row.best_eval_loss = s.best_loss.map(|b| b.value);
                row.final_eval_accuracy = s.final_eval_accuracy;
                row.mean_step_wall_ms = s.mean_step_wall_ms;
            }
            Err(e) => {
                log::warn!("sweep cell {:?} seed {} failed: {e}", cell.value, cell.seed);
                row.status = format!("error: {e}");
            }
        }
        row
    });

    let result = SweepResult {
        axis,
        values,
        seeds,
        rows,
    };
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let path = root.join(SWEEP_FILE);
    fs::write(&path, result.to_csv()).map_err(|e| Error::io(&path, e))?;
    Ok(result)
}
