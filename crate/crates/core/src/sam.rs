//! Sharpness-aware minimization as a meta-optimizer over [`crate::optim`].
//!
//! One step with ascent micro-batch `M ⊆ B`:
//!
//! ```text
//! g_M   = ∇ L_M(w)
//! w_adv = w + ρ g_M / ‖g_M‖₂
//! g_adv = ∇ L_B(w_adv)
//! w'    = opt(w, g_adv)
//! ```
//!
//! With `m > 1` the micro-batch is cut into `m` chunks, each chunk gets its
//! own adversarial point, and the descent gradients are averaged in
//! ascending chunk order.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{Batch, Objective};
use crate::optim::{self, OptimizerConfig, OptimizerState};
use crate::par::{self, Exec};
use crate::rng::Stream;
use crate::tensor::{GradVector, ParamVector};

/// Purpose tag of the per-step stream used to sample ascent micro-batches.
pub const ASCENT_STREAM: &str = "ascent";

/// Which examples the descent gradient of chunk `j` is evaluated on when
/// `m > 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MDescent {
    /// Contiguous shard `j` of `m` equal shards of `B`.
    #[default]
    Shard,
    /// All of `B`.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamConfig {
    #[serde(default = "SamConfig::default_rho")]
    pub rho: f64,
    /// Ascent micro-batch size `a`; `None` means `max(b / 4, 1)`.
    #[serde(default)]
    pub ascent_size: Option<usize>,
    #[serde(default = "SamConfig::default_m")]
    pub m: usize,
    #[serde(default = "SamConfig::default_floor")]
    pub grad_norm_floor: f64,
    #[serde(default = "SamConfig::default_enabled")]
    pub enabled: bool,
    #[serde(default)]
    pub m_descent: MDescent,
    /// Also evaluate `L_B(w)` so the trace carries the adversarial loss gap.
    /// Costs one extra forward pass unless `M = B`.
    #[serde(default = "SamConfig::default_enabled")]
    pub trace_base_loss: bool,
}

impl Default for SamConfig {
    fn default() -> Self {
        SamConfig {
            rho: Self::default_rho(),
            ascent_size: None,
            m: 1,
            grad_norm_floor: Self::default_floor(),
            enabled: true,
            m_descent: MDescent::Shard,
            trace_base_loss: true,
        }
    }
}

impl SamConfig {
    fn default_rho() -> f64 {
        0.15
    }
    fn default_m() -> usize {
        1
    }
    fn default_floor() -> f64 {
        1e-12
    }
    fn default_enabled() -> bool {
        true
    }

    pub fn disabled() -> Self {
        SamConfig {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn with_rho(rho: f64) -> Self {
        SamConfig {
            rho,
            ..Self::default()
        }
    }

    /// Whether a step perturbs the weights at all. `ρ = 0` behaves as
    /// disabled.
    pub fn is_active(&self) -> bool {
        self.enabled && self.rho > 0.0
    }

    pub fn ascent_size_for(&self, b: usize) -> usize {
        self.ascent_size.unwrap_or((b / 4).max(1))
    }

    /// Checks the config against batch size `b`.
    pub fn validate(&self, b: usize) -> Result<()> {
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::config(format!(
                "rho must be finite and ≥ 0, got {}",
                self.rho
            )));
        }
        if self.grad_norm_floor.is_nan() || self.grad_norm_floor < 0.0 {
            return Err(Error::config(format!(
                "grad_norm_floor must be ≥ 0, got {}",
                self.grad_norm_floor
            )));
        }
        if b == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        let a = self.ascent_size_for(b);
        if a == 0 || a > b {
            return Err(Error::config(format!(
                "ascent size a = {a} must satisfy 1 ≤ a ≤ b = {b}"
            )));
        }
        if self.m == 0 || self.m > a {
            return Err(Error::config(format!(
                "m = {} must satisfy 1 ≤ m ≤ a = {a}",
                self.m
            )));
        }
        if !a.is_multiple_of(self.m) {
            return Err(Error::config(format!(
                "a = {a} is not divisible by m = {}",
                self.m
            )));
        }
        if self.m_descent == MDescent::Shard && !b.is_multiple_of(self.m) {
            return Err(Error::config(format!(
                "b = {b} is not divisible by m = {} (needed to shard the descent batch)",
                self.m
            )));
        }
        Ok(())
    }
}

/// A sampled ascent micro-batch and the batch rows it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroBatch {
    pub indices: Vec<usize>,
    pub batch: Batch,
}

/// `a` distinct rows of `batch`, ascending. `a == b` returns the whole batch
/// without touching `rng`; otherwise this is
/// `rng.sample_without_replacement(b, a)`.
pub fn sample_ascent_microbatch(batch: &Batch, a: usize, rng: &mut Stream) -> Result<MicroBatch> {
    let b = batch.len();
    if a == 0 || a > b {
        return Err(Error::config(format!(
            "ascent size a = {a} must satisfy 1 ≤ a ≤ b = {b}"
        )));
    }
    if a == b {
        return Ok(MicroBatch {
            indices: (0..b).collect(),
            batch: batch.clone(),
        });
    }
    let indices = rng.sample_without_replacement(b, a);
    let batch = batch.select(&indices);
    Ok(MicroBatch { indices, batch })
}

/// Result of one ascent: the perturbation actually applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Ascent {
    pub grad_norm: f64,
    /// `ε̂` over the flat parameter view; all zeros when skipped.
    pub epsilon: Vec<f64>,
    pub skipped: bool,
}

/// `w_adv = w + ρ g / ‖g‖₂`, or `w` itself when `‖g‖₂ ≤ grad_norm_floor`.
pub fn compute_ascent_point(
    params: &ParamVector,
    ascent_grad: &GradVector,
    rho: f64,
    grad_norm_floor: f64,
) -> Result<(ParamVector, Ascent)> {
    params.check_congruent(ascent_grad.as_params(), "compute_ascent_point")?;
    ascent_grad.check_finite("ascent")?;
    let grad_norm = ascent_grad.norm();
    if !grad_norm.is_finite() {
        return Err(Error::non_finite("ascent gradient norm overflowed"));
    }
    if grad_norm <= grad_norm_floor || rho == 0.0 {
        let ascent = Ascent {
            grad_norm,
            epsilon: vec![0.0; params.total_len()],
            skipped: true,
        };
        return Ok((params.clone(), ascent));
    }
    let scale = rho / grad_norm;
    let epsilon: Vec<f64> = ascent_grad.flatten().iter().map(|g| g * scale).collect();
    let w = params.flatten();
    let w_adv: Vec<f64> = w.iter().zip(&epsilon).map(|(x, e)| x + e).collect();
    let ascent = Ascent {
        grad_norm,
        epsilon,
        skipped: false,
    };
    Ok((ParamVector::unflatten(&w_adv, params)?, ascent))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamStepTrace {
    /// `‖∇L_M(w)‖₂`; the mean over chunks when `m > 1`, `None` when SAM is off.
    pub ascent_grad_norm: Option<f64>,
    /// One `ε̂` per chunk (empty when SAM is off).
    pub epsilons: Vec<Vec<f64>>,
    /// Descent loss at the adversarial point(s), averaged over chunks. Equals
    /// `L_B(w)` when SAM is off.
    pub adv_loss: f64,
    /// `L_B(w)`, when known.
    pub base_loss: Option<f64>,
    pub skipped_ascent: bool,
    pub skipped_chunks: usize,
}

impl SamStepTrace {
    /// Perturbation of the first chunk.
    pub fn epsilon(&self) -> &[f64] {
        self.epsilons.first().map(Vec::as_slice).unwrap_or(&[])
    }

    /// `L_B(w_adv) − L_B(w)` when SAM is on and the base loss was traced.
    pub fn adv_loss_gap(&self) -> Option<f64> {
        match (self.ascent_grad_norm, self.base_loss) {
            (Some(_), Some(base)) => Some(self.adv_loss - base),
            _ => None,
        }
    }
}

struct ChunkResult {
    loss: f64,
    grad: GradVector,
    ascent: Ascent,
}

/// The SAM gradient `g_adv` for one batch.
///
/// SAM off (or `ρ = 0`): `∇L_B(w)` with no rng use. Otherwise `M` is sampled
/// from `rng`, split into `m` contiguous chunks of `a / m` rows, and chunk
/// `j` yields `∇L_{D_j}(w_adv(j))` where `D_j` is shard `j` of `B` (or all
/// of `B` under [`MDescent::Full`]). Chunks may run concurrently under
/// [`Exec::Parallel`]; the mean is always summed in ascending `j`.
pub fn sam_gradient<O: Objective + ?Sized>(
    objective: &O,
    params: &ParamVector,
    batch: &Batch,
    config: &SamConfig,
    rng: &mut Stream,
    exec: Exec,
) -> Result<(GradVector, SamStepTrace)> {
    let b = batch.len();
    config.validate(b)?;
    if !config.is_active() {
        let (loss, grad) = objective.loss_and_grad(params, batch)?;
        grad.check_finite("descent")?;
        return Ok((
            grad,
            SamStepTrace {
                ascent_grad_norm: None,
                epsilons: Vec::new(),
                adv_loss: loss,
                base_loss: Some(loss),
                skipped_ascent: false,
                skipped_chunks: 0,
            },
        ));
    }

    let a = config.ascent_size_for(b);
    let m = config.m;
    let micro = sample_ascent_microbatch(batch, a, rng)?;
    let whole_batch = a == b && m == 1;

    let chunk = |j: usize| -> Result<(ChunkResult, f64)> {
        let ascent_batch = if m == 1 {
            micro.batch.clone()
        } else {
            micro.batch.shard(j, m)
        };
        let (ascent_loss, g) = objective
            .loss_and_grad(params, &ascent_batch)
            .map_err(|e| in_chunk(e, j, m))?;
        let (w_adv, ascent) = compute_ascent_point(params, &g, config.rho, config.grad_norm_floor)
            .map_err(|e| in_chunk(e, j, m))?;
        let descent = match (config.m_descent, m) {
            (_, 1) | (MDescent::Full, _) => None,
            (MDescent::Shard, _) => Some(batch.shard(j, m)),
        };
        let (loss, grad) = objective
            .loss_and_grad(&w_adv, descent.as_ref().unwrap_or(batch))
            .map_err(|e| in_chunk(e, j, m))?;
        grad.check_finite(&chunk_context(j, m))
            .map_err(|e| in_chunk(e, j, m))?;
        Ok((ChunkResult { loss, grad, ascent }, ascent_loss))
    };

    let results = par::try_map_indexed(exec, m, chunk)?;
    let base_loss = if whole_batch {
        Some(results[0].1)
    } else if config.trace_base_loss {
        Some(objective.loss(params, batch)?)
    } else {
        None
    };

    let mut grads = Vec::with_capacity(m);
    let mut ascents = Vec::with_capacity(m);
    let mut adv_loss = 0.0;
    for (r, _) in results {
        grads.push(r.grad);
        ascents.push(r.ascent);
        adv_loss += r.loss;
    }
    adv_loss /= m as f64;
    let grad = if m == 1 {
        grads.pop().expect("one chunk")
    } else {
        let mut sum = GradVector::zeros_like(params);
        for g in &grads {
            sum.axpy(1.0, g)?;
        }
        sum.scale(1.0 / m as f64);
        sum
    };
    let skipped_chunks = ascents.iter().filter(|a| a.skipped).count();
    let mean_norm = ascents.iter().map(|a| a.grad_norm).sum::<f64>() / m as f64;
    Ok((
        grad,
        SamStepTrace {
            ascent_grad_norm: Some(mean_norm),
            epsilons: ascents.into_iter().map(|a| a.epsilon).collect(),
            adv_loss,
            base_loss,
            skipped_ascent: skipped_chunks > 0,
            skipped_chunks,
        },
    ))
}

fn chunk_context(j: usize, m: usize) -> String {
    format!("SAM chunk {j} of {m}")
}

fn in_chunk(e: Error, j: usize, m: usize) -> Error {
    match e {
        Error::NonFinite { context } => {
            Error::non_finite(format!("{}: {context}", chunk_context(j, m)))
        }
        other => other,
    }
}

/// One row of a training metrics file. Columns that were not measured on a
/// step are `None` and serialize as empty CSV fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub train_loss: Option<f64>,
    pub eval_loss: Option<f64>,
    pub eval_accuracy: Option<f64>,
    pub ascent_grad_norm: Option<f64>,
    pub adv_loss_gap: Option<f64>,
    pub step_wall_ms: f64,
    /// Chunks whose ascent was skipped on this step.
    pub skipped_ascent_count: u64,
}

impl MetricsRecord {
    pub const FIELDS: [&'static str; 8] = [
        "step",
        "train_loss",
        "eval_loss",
        "eval_accuracy",
        "ascent_grad_norm",
        "adv_loss_gap",
        "step_wall_ms",
        "skipped_ascent_count",
    ];
}

/// Output of [`sam_train_step`].
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub params: ParamVector,
    pub opt_state: OptimizerState,
    pub trace: SamStepTrace,
    pub metrics: MetricsRecord,
}

/// Computes `g_adv` and applies exactly one base-optimizer step with it.
/// The metrics row is numbered `opt_state.step_count + 1`.
#[allow(clippy::too_many_arguments)]
pub fn sam_train_step<O: Objective + ?Sized>(
    objective: &O,
    params: &ParamVector,
    batch: &Batch,
    sam_config: &SamConfig,
    opt_config: &OptimizerConfig,
    opt_state: &OptimizerState,
    rng: &mut Stream,
    exec: Exec,
) -> Result<StepOutput> {
    let start = Instant::now();
    let (grad, trace) = sam_gradient(objective, params, batch, sam_config, rng, exec)?;
    let mut params = params.clone();
    let mut opt_state = opt_state.clone();
    optim::step_in_place(opt_config, &mut opt_state, &mut params, &grad)?;
    let step_wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let metrics = MetricsRecord {
        step: opt_state.step_count,
        train_loss: trace.base_loss,
        eval_loss: None,
        eval_accuracy: None,
        ascent_grad_norm: trace.ascent_grad_norm,
        adv_loss_gap: trace.adv_loss_gap(),
        step_wall_ms,
        skipped_ascent_count: trace.skipped_chunks as u64,
    };
    Ok(StepOutput {
        params,
        opt_state,
        trace,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{DataFree, DiagonalQuadratic};
    use crate::optim::state_init;
    use crate::tensor::Tensor;

    fn pv(values: &[f64]) -> ParamVector {
        ParamVector::new(vec![("w".into(), Tensor::vector(values.to_vec()))]).unwrap()
    }

    #[test]
    fn epsilon_for_three_four() {
        let w = pv(&[0.0, 0.0]);
        let g = GradVector::from_flat(&[3.0, 4.0], &w).unwrap();
        let (w_adv, asc) = compute_ascent_point(&w, &g, 0.15, 1e-12).unwrap();
        assert!(!asc.skipped);
        assert!((asc.epsilon[0] - 0.09).abs() < 1e-15);
        assert!((asc.epsilon[1] - 0.12).abs() < 1e-15);
        assert!((w_adv.norm() - 0.15).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_skips() {
        let w = pv(&[1.0, -2.0]);
        let g = GradVector::zeros_like(&w);
        let (w_adv, asc) = compute_ascent_point(&w, &g, 0.15, 1e-12).unwrap();
        assert!(asc.skipped);
        assert_eq!(w_adv, w);
    }

    #[test]
    fn non_finite_ascent_gradient_errors() {
        let w = pv(&[1.0]);
        let g = GradVector::from_flat(&[f64::NAN], &w).unwrap();
        assert!(matches!(
            compute_ascent_point(&w, &g, 0.1, 0.0),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn closed_form_quadratic_step() {
        let obj = DataFree(DiagonalQuadratic::new(vec![4.0]));
        let cfg = SamConfig {
            rho: 0.1,
            ..SamConfig::default()
        };
        let opt = OptimizerConfig::sgd(0.05);
        let w = pv(&[1.0]);
        let state = state_init(&opt, &w);
        let mut rng = Stream::new(0, 1, ASCENT_STREAM);
        let out = sam_train_step(
            &obj,
            &w,
            &Batch::unit(),
            &cfg,
            &opt,
            &state,
            &mut rng,
            Exec::Sequential,
        )
        .unwrap();
        assert_eq!(out.params.flatten(), vec![0.78]);
        assert_eq!(out.metrics.step, 1);
    }

    #[test]
    fn disabled_does_not_touch_rng() {
        let obj = DataFree(DiagonalQuadratic::new(vec![1.0, 2.0]));
        let mut rng = Stream::new(3, 4, ASCENT_STREAM);
        let batch = Batch::new(Tensor::zeros(&[8, 1]), vec![0; 8]).unwrap();
        let (g, trace) = sam_gradient(
            &obj,
            &pv(&[1.0, 1.0]),
            &batch,
            &SamConfig::disabled(),
            &mut rng,
            Exec::Sequential,
        )
        .unwrap();
        assert_eq!(rng.position(), 0);
        assert_eq!(g.flatten(), vec![1.0, 2.0]);
        assert_eq!(trace.ascent_grad_norm, None);
        let (_, _) = sam_gradient(
            &obj,
            &pv(&[1.0, 1.0]),
            &batch,
            &SamConfig::with_rho(0.0),
            &mut rng,
            Exec::Sequential,
        )
        .unwrap();
        assert_eq!(rng.position(), 0);
    }

    #[test]
    fn validation_rules() {
        let ok = SamConfig {
            ascent_size: Some(8),
            m: 4,
            ..SamConfig::default()
        };
        assert!(ok.validate(16).is_ok());
        assert!(ok.validate(4).is_err(), "a > b");
        assert!(
            SamConfig { m: 3, ..ok.clone() }.validate(16).is_err(),
            "a % m"
        );
        assert!(SamConfig { m: 0, ..ok.clone() }.validate(16).is_err());
        assert!(SamConfig {
            rho: -0.1,
            ..ok.clone()
        }
        .validate(16)
        .is_err());
        let odd = SamConfig {
            ascent_size: Some(4),
            m: 4,
            ..SamConfig::default()
        };
        assert!(odd.validate(18).is_err(), "b % m under shard descent");
        assert!(SamConfig {
            m_descent: MDescent::Full,
            ..odd
        }
        .validate(18)
        .is_ok());
    }

    #[test]
    fn default_ascent_size_is_quarter_batch() {
        let c = SamConfig::default();
        assert_eq!(c.ascent_size_for(128), 32);
        assert_eq!(c.ascent_size_for(3), 1);
    }

    #[test]
    fn microbatch_full_and_single() {
        let batch = Batch::new(
            Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap(),
            vec![0, 1, 0],
        )
        .unwrap();
        let mut rng = Stream::new(0, 0, ASCENT_STREAM);
        let full = sample_ascent_microbatch(&batch, 3, &mut rng).unwrap();
        assert_eq!(full.batch, batch);
        assert!(sample_ascent_microbatch(&batch, 4, &mut rng).is_err());
        let one = Batch::new(Tensor::matrix(1, 1, vec![5.0]).unwrap(), vec![1]).unwrap();
        assert_eq!(
            sample_ascent_microbatch(&one, 1, &mut rng).unwrap().batch,
            one
        );
    }

    #[test]
    fn microbatch_replays_stream() {
        let batch = Batch::new(
            Tensor::matrix(128, 1, (0..128).map(f64::from).collect()).unwrap(),
            vec![0; 128],
        )
        .unwrap();
        let mut rng = Stream::new(42, 7, ASCENT_STREAM);
        let mb = sample_ascent_microbatch(&batch, 32, &mut rng).unwrap();
        let replay = Stream::new(42, 7, ASCENT_STREAM).sample_without_replacement(128, 32);
        assert_eq!(mb.indices, replay);
        let rows: Vec<usize> = mb
            .batch
            .features
            .data()
            .iter()
            .map(|&x| x as usize)
            .collect();
        assert_eq!(rows, replay);
    }
}
