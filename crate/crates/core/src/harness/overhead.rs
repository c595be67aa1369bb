use std::fs;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::draw_batch;
use crate::error::{Error, Result};
use crate::optim::state_init;
use crate::rng::Stream;
use crate::sam::{sam_train_step, SamConfig, ASCENT_STREAM};

pub const OVERHEAD_FILE: &str = "overhead.json";
const WARMUP_STEPS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    /// Median over steps of `t_sam / t_baseline` for paired steps.
    pub ratio: f64,
    pub sam_median_ms: f64,
    pub baseline_median_ms: f64,
    pub steps: usize,
    pub warmup_steps: usize,
    pub ascent_size: usize,
    pub m: usize,
    pub sam_enabled: bool,
    pub timer_resolution_ms: f64,
    /// Set when the timer resolution exceeds 1% of the baseline step time.
    pub timer_warning: bool,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Smallest observable non-zero `Instant` increment.
pub fn timer_resolution() -> Duration {
    (0..50)
        .map(|_| {
            let t0 = Instant::now();
            loop {
                let d = t0.elapsed();
                if !d.is_zero() {
                    break d;
                }
            }
        })
        .min()
        .expect("non-empty")
}

/// Times `overhead_steps` training steps with the configured SAM settings
/// against the same steps with SAM disabled. Both arms start from the same
/// initialization, see the same batches, and run alternately (order flipped
/// every step) so drift affects them equally. The SAM arm skips the
/// diagnostic `L_B(w)` pass, which plain training does not pay for either.
pub fn measure_overhead(config: &ExperimentConfig) -> Result<OverheadReport> {
    config.validate()?;
    let (train, _) = config.datasets()?;
    let model = config.model.with_init_seed(config.init_seed());
    model.check_task(train.features.shape()[1], train.num_classes)?;
    let sam_cfg = SamConfig {
        trace_base_loss: false,
        ..config.sam.clone()
    };
    let base_cfg = SamConfig {
        enabled: false,
        ..config.sam.clone()
    };
    let init = model.init()?;
    let mut arms = [
        (base_cfg, init.clone(), state_init(&config.optimizer, &init)),
        (sam_cfg, init.clone(), state_init(&config.optimizer, &init)),
    ];
    let mut times = [Vec::new(), Vec::new()];
    let total = WARMUP_STEPS + config.overhead_steps;
    for step in 1..=total as u64 {
        let batch = draw_batch(&train, config.batch_size, config.run_seed, step);
        let order = if step % 2 == 0 { [0, 1] } else { [1, 0] };
        for arm in order {
            let (sam, params, state) = &mut arms[arm];
            let mut rng = Stream::new(config.run_seed, step, ASCENT_STREAM);
            let t0 = Instant::now();
            let out = sam_train_step(
                &model,
                params,
                &batch,
                sam,
                &config.optimizer,
                state,
                &mut rng,
                config.exec,
            )?;
            let ms = t0.elapsed().as_secs_f64() * 1e3;
            *params = out.params;
            *state = out.opt_state;
            if step as usize > WARMUP_STEPS {
                times[arm].push(ms);
            }
        }
    }
    let ratios: Vec<f64> = times[1].iter().zip(&times[0]).map(|(s, b)| s / b).collect();
    let baseline_median_ms = median(times[0].clone());
    let resolution_ms = timer_resolution().as_secs_f64() * 1e3;
    let report = OverheadReport {
        ratio: median(ratios),
        sam_median_ms: median(times[1].clone()),
        baseline_median_ms,
        steps: config.overhead_steps,
        warmup_steps: WARMUP_STEPS,
        ascent_size: config.sam.ascent_size_for(config.batch_size),
        m: config.sam.m,
        sam_enabled: config.sam.is_active(),
        timer_resolution_ms: resolution_ms,
        timer_warning: resolution_ms > 0.01 * baseline_median_ms,
    };
    if report.timer_warning {
        log::warn!(
            "timer resolution {resolution_ms:.3e} ms exceeds 1% of the {baseline_median_ms:.3e} ms step time"
        );
    }
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(OVERHEAD_FILE);
    let text = serde_json::to_string_pretty(&report)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(report)
}
