use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::config::ExperimentConfig;
use super::metrics::{self, Best};
use crate::error::{Error, Result};
use crate::objective::Batch;
use crate::optim::state_init;
use crate::rng::Stream;
use crate::sam::{sam_train_step, MetricsRecord, ASCENT_STREAM};
use crate::tasks::Dataset;
use crate::tensor::ParamVector;

/// Purpose tag of the per-step stream that draws training batches.
pub const DATA_STREAM: &str = "data";

pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_ACCURACY_CHECKPOINT: &str = "best_accuracy.ckpt";
pub const BEST_LOSS_CHECKPOINT: &str = "best_loss.ckpt";

/// Version recorded in run manifests. Builds may inject a `git describe`
/// string through `SAMLAB_BUILD_DESCRIBE`.
pub fn version_string() -> String {
    option_env!("SAMLAB_BUILD_DESCRIBE")
        .map(str::to_string)
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub run_seed: u64,
    pub init_seed: u64,
    pub train_dataset: String,
    pub test_dataset: String,
    pub train_size: usize,
    pub test_size: usize,
    pub param_count: usize,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_step: u64,
    pub final_eval_loss: Option<f64>,
    pub final_eval_accuracy: Option<f64>,
    pub best_accuracy: Option<Best>,
    pub best_loss: Option<Best>,
    pub mean_step_wall_ms: Option<f64>,
    pub skipped_ascent_total: u64,
}

impl RunSummary {
    pub fn from_records(records: &[MetricsRecord]) -> Self {
        let last_eval = records.iter().rev().find(|r| r.eval_accuracy.is_some());
        let mean = (!records.is_empty())
            .then(|| records.iter().map(|r| r.step_wall_ms).sum::<f64>() / records.len() as f64);
        RunSummary {
            final_step: records.last().map_or(0, |r| r.step),
            final_eval_loss: last_eval.and_then(|r| r.eval_loss),
            final_eval_accuracy: last_eval.and_then(|r| r.eval_accuracy),
            best_accuracy: metrics::best_accuracy(records),
            best_loss: metrics::best_loss(records),
            mean_step_wall_ms: mean,
            skipped_ascent_total: records.iter().map(|r| r.skipped_ascent_count).sum(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub final_params: ParamVector,
    pub metrics_path: PathBuf,
    pub records: Vec<MetricsRecord>,
    pub summary: RunSummary,
}

/// Batch of `b` training rows drawn uniformly with replacement from stream
/// `(run_seed, step, "data")`.
pub fn draw_batch(train: &Dataset, b: usize, run_seed: u64, step: u64) -> Batch {
    let mut rng = Stream::new(run_seed, step, DATA_STREAM);
    let idx: Vec<usize> = (0..b).map(|_| rng.index(train.len())).collect();
    train.gather(&idx)
}

fn at_step(e: Error, step: u64) -> Error {
    match e {
        Error::NonFinite { context } => Error::non_finite(format!("step {step}: {context}")),
        other => other,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Trains for `total_steps`, evaluating on the test split every
/// `eval_every` steps and at the last step. Writes, under `output_dir`: the
/// manifest, `metrics.csv` (one row per step), the final checkpoint, the
/// best-accuracy and best-loss checkpoints, periodic `step_NNNNNN.ckpt`
/// files, and `summary.json`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome> {
    config.validate()?;
    let (train, test) = config.datasets()?;
    let model = config.model.with_init_seed(config.init_seed());
    model.check_task(train.features.shape()[1], train.num_classes)?;
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(
        &out.join(MANIFEST_FILE),
        &RunManifest {
            version: version_string(),
            run_seed: config.run_seed,
            init_seed: config.init_seed(),
            train_dataset: train.descriptor.clone(),
            test_dataset: test.descriptor.clone(),
            train_size: train.len(),
            test_size: test.len(),
            param_count: model.param_count(),
            config: config.clone(),
        },
    )?;

    let mut params = model.init()?;
    let mut state = state_init(&config.optimizer, &params);
    let test_batch = test.as_batch();
    let mut records = Vec::with_capacity(config.total_steps as usize);
    let (mut best_acc, mut best_loss): (Option<f64>, Option<f64>) = (None, None);

    for step in 1..=config.total_steps {
        let batch = draw_batch(&train, config.batch_size, config.run_seed, step);
        let mut ascent = Stream::new(config.run_seed, step, ASCENT_STREAM);
        let result = sam_train_step(
            &model,
            &params,
            &batch,
            &config.sam,
            &config.optimizer,
            &state,
            &mut ascent,
            config.exec,
        )
        .map_err(|e| at_step(e, step))?;
        params = result.params;
        state = result.opt_state;
        let mut rec = result.metrics;

        if step % config.eval_every == 0 || step == config.total_steps {
            let (loss, acc) = model
                .evaluate(&params, &test_batch)
                .map_err(|e| at_step(e, step))?;
            rec.eval_loss = Some(loss);
            rec.eval_accuracy = Some(acc);
            if best_acc.is_none_or(|b| acc > b) {
                best_acc = Some(acc);
                save_checkpoint(&params, &out.join(BEST_ACCURACY_CHECKPOINT))?;
            }
            if best_loss.is_none_or(|b| loss < b) {
                best_loss = Some(loss);
                save_checkpoint(&params, &out.join(BEST_LOSS_CHECKPOINT))?;
            }
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                save_checkpoint(&params, &out.join(format!("step_{step:06}.ckpt")))?;
            }
        }
        records.push(rec);
    }

    let metrics_path = out.join(METRICS_FILE);
    metrics::write_metrics(&metrics_path, &records)?;
    save_checkpoint(&params, &out.join(FINAL_CHECKPOINT))?;
    let summary = RunSummary::from_records(&records);
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    log::info!(
        "run finished: {} steps, best accuracy {:?}",
        summary.final_step,
        summary.best_accuracy.map(|b| b.value)
    );
    Ok(RunOutcome {
        final_params: params,
        metrics_path,
        records,
        summary,
    })
}
