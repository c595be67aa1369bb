//! Config-driven experiments: training runs, sweeps, overhead timing, and
//! the on-disk formats they produce.

pub mod checkpoint;
pub mod config;
pub mod metrics;
mod overhead;
mod run;
mod sweep;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{ExperimentConfig, TaskSpec, SPEC_VERSION};
pub use metrics::{read_metrics, write_metrics, Best};
pub use overhead::{measure_overhead, timer_resolution, OverheadReport, OVERHEAD_FILE};
pub use run::{
    draw_batch, run_experiment, version_string, RunManifest, RunOutcome, RunSummary,
    BEST_ACCURACY_CHECKPOINT, BEST_LOSS_CHECKPOINT, DATA_STREAM, FINAL_CHECKPOINT, MANIFEST_FILE,
    METRICS_FILE, SUMMARY_FILE,
};
pub use sweep::{sweep, SweepAxis, SweepResult, SweepRow, SWEEP_FILE, SWEEP_HEADER};
