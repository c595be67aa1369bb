//! Model zoo: an MLP classifier and a small encoder-only transformer.

mod mlp;
mod transformer;

pub use mlp::{mlp_init, mlp_logits, mlp_loss, mlp_loss_and_grad, Activation, MlpSpec};
pub use transformer::{
    attention_maps, positional_encoding, transformer_forward, transformer_init, transformer_loss,
    transformer_loss_and_grad, TransformerForward, TransformerSpec, LAYER_NORM_EPS,
};

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, Tape};
use crate::error::{Error, Result};
use crate::objective::{Batch, Objective};
use crate::rng::Stream;
use crate::tensor::{GradVector, ParamVector, Tensor};

/// `[fan_in, fan_out]` matrix with entries uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn glorot_uniform(rng: &mut Stream, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.uniform(-bound, bound))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("positive dims")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Mlp(MlpSpec),
    Transformer(TransformerSpec),
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Mlp(s) => s.validate(),
            ModelSpec::Transformer(s) => s.validate(),
        }
    }

    pub fn init(&self) -> Result<ParamVector> {
        match self {
            ModelSpec::Mlp(s) => mlp_init(s),
            ModelSpec::Transformer(s) => transformer_init(s),
        }
    }

    pub fn with_init_seed(&self, seed: u64) -> ModelSpec {
        let mut out = self.clone();
        match &mut out {
            ModelSpec::Mlp(s) => s.init_seed = seed,
            ModelSpec::Transformer(s) => s.init_seed = seed,
        }
        out
    }

    pub fn param_count(&self) -> usize {
        match self {
            ModelSpec::Mlp(s) => s.param_count(),
            ModelSpec::Transformer(s) => s.param_count(),
        }
    }

    /// Row-wise logits for `batch`.
    pub fn logits(&self, params: &ParamVector, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = match self {
            ModelSpec::Mlp(s) => mlp_logits(&mut tape, s, params, batch)?,
            ModelSpec::Transformer(s) => {
                transformer_forward(&mut tape, s, params, &batch.features)?.logits
            }
        };
        Ok(tape.value(v).clone())
    }

    pub fn predict(&self, params: &ParamVector, batch: &Batch) -> Result<Vec<usize>> {
        let logits = self.logits(params, batch)?;
        let classes = logits.shape()[1];
        Ok(logits
            .data()
            .chunks(classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
                        if x > best.1 {
                            (i, x)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect())
    }

    /// Mean cross-entropy and accuracy from a single forward pass.
    pub fn evaluate(&self, params: &ParamVector, batch: &Batch) -> Result<(f64, f64)> {
        let logits = self.logits(params, batch)?;
        let classes = logits.shape()[1];
        let mut loss = 0.0;
        let mut hits = 0usize;
        for (row, &label) in logits.data().chunks(classes).zip(&batch.labels) {
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
            loss += log_sum_exp(row) - row[label];
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
                    if x > best.1 {
                        (i, x)
                    } else {
                        best
                    }
                })
                .0;
            hits += usize::from(pred == label);
        }
        let n = batch.len() as f64;
        let loss = loss / n;
        if !loss.is_finite() {
            return Err(Error::non_finite("evaluation loss"));
        }
        Ok((loss, hits as f64 / n))
    }

    /// Checks that the model's input and output sizes fit a dataset with
    /// `width` feature columns and `classes` label values.
    pub fn check_task(&self, width: usize, classes: usize) -> Result<()> {
        match self {
            ModelSpec::Mlp(s) => {
                let (inp, out) = (s.layer_sizes[0], *s.layer_sizes.last().expect("validated"));
                if inp != width || out != classes {
                    return Err(Error::config(format!(
                        "MLP maps {inp} inputs to {out} classes but the task has {width} features and {classes} classes"
                    )));
                }
            }
            ModelSpec::Transformer(s) => {
                if s.vocab_size < classes {
                    return Err(Error::config(format!(
                        "vocab_size {} is smaller than the task vocabulary {classes}",
                        s.vocab_size
                    )));
                }
                if s.max_seq_len < width {
                    return Err(Error::config(format!(
                        "max_seq_len {} is shorter than the task sequences ({width})",
                        s.max_seq_len
                    )));
                }
            }
        }
        Ok(())
    }

    /// Fraction of examples whose arg-max prediction equals the label.
    pub fn accuracy(&self, params: &ParamVector, batch: &Batch) -> Result<f64> {
        let pred = self.predict(params, batch)?;
        let hits = pred
            .iter()
            .zip(&batch.labels)
            .filter(|(p, l)| p == l)
            .count();
        Ok(hits as f64 / batch.len() as f64)
    }
}

impl Objective for ModelSpec {
    fn loss(&self, params: &ParamVector, batch: &Batch) -> Result<f64> {
        match self {
            ModelSpec::Mlp(s) => s.loss(params, batch),
            ModelSpec::Transformer(s) => s.loss(params, batch),
        }
    }

    fn loss_and_grad(&self, params: &ParamVector, batch: &Batch) -> Result<(f64, GradVector)> {
        match self {
            ModelSpec::Mlp(s) => s.loss_and_grad(params, batch),
            ModelSpec::Transformer(s) => s.loss_and_grad(params, batch),
        }
    }
}
