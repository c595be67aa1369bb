//! Base first-order optimizers: SGD, SGD with momentum, Adam, and AdaFactor.
//!
//! AdaFactor keeps factored second moments for parameters of rank ≥ 2
//! (row and column accumulators over the matrix view `[Π leading dims, last dim]`)
//! and a full accumulator for vectors and scalars. The second-moment decay is
//! `1 - t^(-c)`, updates are clipped to RMS ≤ `d`, and the step uses a constant
//! learning rate with no first moment, relative step sizing, or parameter scaling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{GradVector, ParamVector, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
    Adafactor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    /// Adam denominator epsilon, or AdaFactor's regularizer added to `g²`.
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    /// AdaFactor decay exponent `c` in `1 - t^(-c)`.
    #[serde(default = "defaults::decay_exponent")]
    pub decay_exponent: f64,
    /// AdaFactor update-RMS clipping threshold `d`.
    #[serde(default = "defaults::clip_threshold")]
    pub clip_threshold: f64,
}

mod defaults {
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn epsilon() -> f64 {
        1e-8
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn decay_exponent() -> f64 {
        0.8
    }
    pub fn clip_threshold() -> f64 {
        1.0
    }
}

impl OptimizerConfig {
    fn base(kind: OptimizerKind, learning_rate: f64) -> Self {
        OptimizerConfig {
            kind,
            learning_rate,
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            epsilon: defaults::epsilon(),
            momentum: defaults::momentum(),
            decay_exponent: defaults::decay_exponent(),
            clip_threshold: defaults::clip_threshold(),
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self::base(OptimizerKind::Sgd, learning_rate)
    }

    pub fn momentum(learning_rate: f64, momentum: f64) -> Self {
        OptimizerConfig {
            momentum,
            ..Self::base(OptimizerKind::Momentum, learning_rate)
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::base(OptimizerKind::Adam, learning_rate)
    }

    /// Decay exponent 0.8, clipping threshold 1.0, `ε = 1e-30`.
    pub fn adafactor(learning_rate: f64) -> Self {
        OptimizerConfig {
            epsilon: 1e-30,
            ..Self::base(OptimizerKind::Adafactor, learning_rate)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if [self.decay_exponent, self.clip_threshold]
            .iter()
            .any(|x| x.is_nan() || *x <= 0.0)
        {
            return bad("decay_exponent and clip_threshold must be > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Slot {
    Empty,
    Velocity(Vec<f64>),
    Moments { first: Vec<f64>, second: Vec<f64> },
    Factored { row: Vec<f64>, col: Vec<f64> },
    Unfactored(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step_count: u64,
    names: Vec<String>,
    slots: Vec<Slot>,
}

/// Matrix view used for AdaFactor factoring: `(Π leading dims, last dim)`.
fn factored_dims(t: &Tensor) -> Option<(usize, usize)> {
    if t.rank() < 2 {
        return None;
    }
    let cols = *t.shape().last().expect("rank ≥ 2");
    Some((t.len() / cols, cols))
}

/// Fresh optimizer state with all accumulators zero.
pub fn state_init(config: &OptimizerConfig, params: &ParamVector) -> OptimizerState {
    let slots = params
        .iter()
        .map(|(_, t)| match config.kind {
            OptimizerKind::Sgd => Slot::Empty,
            OptimizerKind::Momentum => Slot::Velocity(vec![0.0; t.len()]),
            OptimizerKind::Adam => Slot::Moments {
                first: vec![0.0; t.len()],
                second: vec![0.0; t.len()],
            },
            OptimizerKind::Adafactor => match factored_dims(t) {
                Some((r, c)) => Slot::Factored {
                    row: vec![0.0; r],
                    col: vec![0.0; c],
                },
                None => Slot::Unfactored(vec![0.0; t.len()]),
            },
        })
        .collect();
    OptimizerState {
        step_count: 0,
        names: params.names().map(str::to_string).collect(),
        slots,
    }
}

impl OptimizerState {
    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn slot(&self, name: &str) -> Option<&Slot> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.slots[i])
    }

    fn check(&self, params: &ParamVector) -> Result<()> {
        if self.names.len() != params.len()
            || !self.names.iter().zip(params.names()).all(|(a, b)| a == b)
        {
            return Err(Error::Usage(
                "optimizer state does not match the parameter layout".into(),
            ));
        }
        Ok(())
    }
}

/// One update `w ← opt(w, g)`; returns the advanced state and parameters.
pub fn opt_step(
    config: &OptimizerConfig,
    state: &OptimizerState,
    params: &ParamVector,
    grads: &GradVector,
) -> Result<(OptimizerState, ParamVector)> {
    let mut state = state.clone();
    let mut params = params.clone();
    step_in_place(config, &mut state, &mut params, grads)?;
    Ok((state, params))
}

/// In-place form of [`opt_step`].
pub fn step_in_place(
    config: &OptimizerConfig,
    state: &mut OptimizerState,
    params: &mut ParamVector,
    grads: &GradVector,
) -> Result<()> {
    params.check_congruent(grads.as_params(), "opt_step")?;
    state.check(params)?;
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::non_finite(format!(
            "optimizer input gradient of {name}"
        )));
    }
    state.step_count += 1;
    let t = state.step_count;
    let lr = config.learning_rate;

    for (i, slot) in state.slots.iter_mut().enumerate() {
        let g = grads.tensor(i).data();
        let w = params.tensor_mut(i);
        match slot {
            Slot::Empty => {
                for (x, gi) in w.data_mut().iter_mut().zip(g) {
                    *x -= lr * gi;
                }
            }
            Slot::Velocity(v) => {
                for ((x, gi), vi) in w.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                    *vi = config.momentum * *vi + gi;
                    *x -= lr * *vi;
                }
            }
            Slot::Moments { first, second } => {
                let (b1, b2) = (config.beta1, config.beta2);
                let c1 = 1.0 - b1.powi(t as i32);
                let c2 = 1.0 - b2.powi(t as i32);
                for (((x, gi), m), v) in w
                    .data_mut()
                    .iter_mut()
                    .zip(g)
                    .zip(first.iter_mut())
                    .zip(second.iter_mut())
                {
                    *m = b1 * *m + (1.0 - b1) * gi;
                    *v = b2 * *v + (1.0 - b2) * gi * gi;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *x -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
                }
            }
            Slot::Factored { row, col } => {
                let decay = adafactor_decay(t, config.decay_exponent);
                let update = factored_update(g, row, col, decay, config.epsilon);
                apply_clipped(w.data_mut(), update, lr, config.clip_threshold);
            }
            Slot::Unfactored(v) => {
                let decay = adafactor_decay(t, config.decay_exponent);
                let update: Vec<f64> = g
                    .iter()
                    .zip(v.iter_mut())
                    .map(|(gi, vi)| {
                        *vi = decay * *vi + (1.0 - decay) * (gi * gi + config.epsilon);
                        gi / vi.sqrt()
                    })
                    .collect();
                apply_clipped(w.data_mut(), update, lr, config.clip_threshold);
            }
        }
    }
    Ok(())
}

/// Second-moment decay rate `1 - t^(-c)` at step `t ≥ 1`.
pub fn adafactor_decay(t: u64, c: f64) -> f64 {
    1.0 - (t as f64).powf(-c)
}

fn factored_update(g: &[f64], row: &mut [f64], col: &mut [f64], decay: f64, eps: f64) -> Vec<f64> {
    let (r, c) = (row.len(), col.len());
    let mut row_mean = vec![0.0; r];
    let mut col_mean = vec![0.0; c];
    for i in 0..r {
        for j in 0..c {
            let sq = g[i * c + j] * g[i * c + j] + eps;
            row_mean[i] += sq;
            col_mean[j] += sq;
        }
    }
    for (acc, s) in row.iter_mut().zip(&row_mean) {
        *acc = decay * *acc + (1.0 - decay) * s / c as f64;
    }
    for (acc, s) in col.iter_mut().zip(&col_mean) {
        *acc = decay * *acc + (1.0 - decay) * s / r as f64;
    }
    let row_avg = row.iter().sum::<f64>() / r as f64;
    let mut update = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            let v = row[i] * col[j] / row_avg;
            update[i * c + j] = g[i * c + j] / v.sqrt();
        }
    }
    update
}

fn apply_clipped(w: &mut [f64], update: Vec<f64>, lr: f64, threshold: f64) {
    let rms = (update.iter().map(|u| u * u).sum::<f64>() / update.len() as f64).sqrt();
    let denom = (rms / threshold).max(1.0);
    for (x, u) in w.iter_mut().zip(update) {
        *x -= lr * u / denom;
    }
}
