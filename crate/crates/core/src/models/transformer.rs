//! Encoder-only transformer that classifies the token at the final position.
//!
//! Each block is post-norm: `x = LN(x + Attn(x))`, `x = LN(x + FF(x))`, with
//! scaled dot-product attention over the whole sequence (no mask), a ReLU
//! feed-forward layer, and sinusoidal position encodings added to the token
//! embeddings.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::objective::{Batch, Objective};
use crate::rng::Stream;
use crate::tensor::{GradVector, ParamVector, Tensor};

use super::glorot_uniform;

pub const LAYER_NORM_EPS: f64 = 1e-6;

fn default_layers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerSpec {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub init_seed: u64,
    /// Number of encoder blocks.
    #[serde(default = "default_layers")]
    pub num_layers: usize,
}

impl TransformerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size must be at least 2"));
        }
        if self.max_seq_len < 1 {
            return Err(Error::config("max_seq_len must be at least 1"));
        }
        if self.num_heads == 0
            || self.model_dim == 0
            || !self.model_dim.is_multiple_of(self.num_heads)
        {
            return Err(Error::config(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.ff_dim == 0 || self.num_layers == 0 {
            return Err(Error::config("ff_dim and num_layers must be at least 1"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// Closed-form parameter count:
    /// `V·d + L·(4d² + 3d + 4d + 2·d·f + f + d) + d·V + V`.
    pub fn param_count(&self) -> usize {
        let (v, d, f, l) = (
            self.vocab_size,
            self.model_dim,
            self.ff_dim,
            self.num_layers,
        );
        v * d + l * (4 * d * d + 3 * d + 4 * d + 2 * d * f + f + d) + d * v + v
    }
}

fn block_name(layer: usize, part: &str) -> String {
    format!("block{layer:02}.{part}")
}

pub fn transformer_init(spec: &TransformerSpec) -> Result<ParamVector> {
    spec.validate()?;
    let (v, d, f) = (spec.vocab_size, spec.model_dim, spec.ff_dim);
    let seed = spec.init_seed;
    let mut entries = vec![
        (
            "embed".to_string(),
            glorot_uniform(&mut Stream::new(seed, 0, "init/embed"), v, d),
        ),
        (
            "head.weight".to_string(),
            glorot_uniform(&mut Stream::new(seed, 0, "init/head"), d, v),
        ),
        ("head.bias".to_string(), Tensor::zeros(&[v])),
    ];
    for l in 0..spec.num_layers {
        let step = l as u64;
        for proj in ["q", "k", "v", "o"] {
            let mut rng = Stream::new(seed, step, &format!("init/attn.{proj}"));
            entries.push((
                block_name(l, &format!("attn.{proj}.weight")),
                glorot_uniform(&mut rng, d, d),
            ));
            // a key bias shifts every score in a row equally, which softmax ignores
            if proj != "k" {
                entries.push((
                    block_name(l, &format!("attn.{proj}.bias")),
                    Tensor::zeros(&[d]),
                ));
            }
        }
        for ln in ["ln1", "ln2"] {
            entries.push((
                block_name(l, &format!("{ln}.gain")),
                Tensor::vector(vec![1.0; d]),
            ));
            entries.push((block_name(l, &format!("{ln}.bias")), Tensor::zeros(&[d])));
        }
        entries.push((
            block_name(l, "ff1.weight"),
            glorot_uniform(&mut Stream::new(seed, step, "init/ff1"), d, f),
        ));
        entries.push((block_name(l, "ff1.bias"), Tensor::zeros(&[f])));
        entries.push((
            block_name(l, "ff2.weight"),
            glorot_uniform(&mut Stream::new(seed, step, "init/ff2"), f, d),
        ));
        entries.push((block_name(l, "ff2.bias"), Tensor::zeros(&[d])));
    }
    ParamVector::new(entries)
}

/// Sinusoidal encoding: `pe[p, 2i] = sin(p / 10000^(2i/d))`, `pe[p, 2i+1] = cos(..)`.
pub fn positional_encoding(seq_len: usize, dim: usize) -> Vec<f64> {
    let mut pe = vec![0.0; seq_len * dim];
    for p in 0..seq_len {
        for j in 0..dim {
            let i2 = (j / 2 * 2) as f64;
            let angle = p as f64 / 10000f64.powf(i2 / dim as f64);
            pe[p * dim + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Token ids from a batch feature matrix `[batch, seq_len]`.
pub fn token_ids(spec: &TransformerSpec, features: &Tensor) -> Result<(usize, usize, Vec<usize>)> {
    let (b, t) = features.dims2().ok_or_else(|| Error::Shape {
        op: "transformer input",
        lhs: features.shape().to_vec(),
        rhs: vec![],
    })?;
    if t > spec.max_seq_len {
        return Err(Error::config(format!(
            "sequence length {t} exceeds max_seq_len {}",
            spec.max_seq_len
        )));
    }
    let ids = features
        .data()
        .iter()
        .map(|&x| {
            if x < 0.0 || x.fract() != 0.0 || !x.is_finite() {
                return Err(Error::config(format!(
                    "token value {x} is not a non-negative integer"
                )));
            }
            let id = x as usize;
            if id >= spec.vocab_size {
                return Err(Error::TokenOutOfRange {
                    token: id,
                    vocab: spec.vocab_size,
                });
            }
            Ok(id)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((b, t, ids))
}

/// Nodes of interest from one forward pass.
pub struct TransformerForward {
    pub logits: Var,
    /// Attention probabilities, indexed `[layer][sequence][head]`, each `[T, T]`.
    pub attention: Vec<Vec<Vec<Var>>>,
}

pub fn transformer_forward(
    tape: &mut Tape,
    spec: &TransformerSpec,
    params: &ParamVector,
    features: &Tensor,
) -> Result<TransformerForward> {
    spec.validate()?;
    let (b, t, ids) = token_ids(spec, features)?;
    let (d, heads, hd) = (spec.model_dim, spec.num_heads, spec.head_dim());
    tape.bind_params(params);
    let p = |tape: &Tape, name: &str| tape.param(name);

    let embed = p(tape, "embed")?;
    let tok = tape.embedding(embed, &ids)?;
    let pe = positional_encoding(t, d);
    let mut tiled = Vec::with_capacity(b * t * d);
    for _ in 0..b {
        tiled.extend_from_slice(&pe);
    }
    let pe = tape.constant(Tensor::matrix(b * t, d, tiled)?);
    let mut x = tape.add(tok, pe)?;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut attention = Vec::with_capacity(spec.num_layers);

    for l in 0..spec.num_layers {
        let proj = |tape: &mut Tape, name: &str, input: Var| -> Result<Var> {
            let w = tape.param(&block_name(l, &format!("{name}.weight")))?;
            let z = tape.matmul(input, w)?;
            if name == "attn.k" {
                return Ok(z);
            }
            let bias = tape.param(&block_name(l, &format!("{name}.bias")))?;
            tape.add_bias(z, bias)
        };
        let q = proj(tape, "attn.q", x)?;
        let k = proj(tape, "attn.k", x)?;
        let v = proj(tape, "attn.v", x)?;
        let mut layer_maps = Vec::with_capacity(b);
        let mut seq_out = Vec::with_capacity(b);
        for s in 0..b {
            let qs = tape.slice_rows(q, s * t, t)?;
            let ks = tape.slice_rows(k, s * t, t)?;
            let vs = tape.slice_rows(v, s * t, t)?;
            let mut head_out = Vec::with_capacity(heads);
            let mut maps = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = tape.slice_cols(qs, h * hd, hd)?;
                let kh = tape.slice_cols(ks, h * hd, hd)?;
                let vh = tape.slice_cols(vs, h * hd, hd)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, scale);
                let probs = tape.softmax(scores)?;
                maps.push(probs);
                head_out.push(tape.matmul(probs, vh)?);
            }
            layer_maps.push(maps);
            seq_out.push(if heads == 1 {
                head_out[0]
            } else {
                tape.concat_cols(&head_out)?
            });
        }
        attention.push(layer_maps);
        let attn = if b == 1 {
            seq_out[0]
        } else {
            tape.concat_rows(&seq_out)?
        };
        let o = proj(tape, "attn.o", attn)?;
        let r = tape.add(x, o)?;
        let g1 = p(tape, &block_name(l, "ln1.gain"))?;
        let b1 = p(tape, &block_name(l, "ln1.bias"))?;
        x = tape.layer_norm(r, g1, b1, LAYER_NORM_EPS)?;

        let h = proj(tape, "ff1", x)?;
        let h = tape.relu(h);
        let f = proj(tape, "ff2", h)?;
        let r = tape.add(x, f)?;
        let g2 = p(tape, &block_name(l, "ln2.gain"))?;
        let b2 = p(tape, &block_name(l, "ln2.bias"))?;
        x = tape.layer_norm(r, g2, b2, LAYER_NORM_EPS)?;
    }

    let last: Vec<usize> = (0..b).map(|s| s * t + t - 1).collect();
    let readout = tape.embedding(x, &last)?;
    let w = p(tape, "head.weight")?;
    let hb = p(tape, "head.bias")?;
    let z = tape.matmul(readout, w)?;
    let logits = tape.add_bias(z, hb)?;
    Ok(TransformerForward { logits, attention })
}

fn check_labels(spec: &TransformerSpec, batch: &Batch) -> Result<()> {
    if let Some(&token) = batch.labels.iter().find(|&&l| l >= spec.vocab_size) {
        return Err(Error::TokenOutOfRange {
            token,
            vocab: spec.vocab_size,
        });
    }
    Ok(())
}

/// Mean cross-entropy of the final-position prediction against the label.
pub fn transformer_loss(
    spec: &TransformerSpec,
    params: &ParamVector,
    batch: &Batch,
) -> Result<f64> {
    check_labels(spec, batch)?;
    let mut tape = Tape::new();
    let fwd = transformer_forward(&mut tape, spec, params, &batch.features)?;
    let loss = tape.cross_entropy(fwd.logits, &batch.labels)?;
    tape.scalar(loss)
}

pub fn transformer_loss_and_grad(
    spec: &TransformerSpec,
    params: &ParamVector,
    batch: &Batch,
) -> Result<(f64, GradVector)> {
    check_labels(spec, batch)?;
    let mut tape = Tape::new();
    let fwd = transformer_forward(&mut tape, spec, params, &batch.features)?;
    let loss = tape.cross_entropy(fwd.logits, &batch.labels)?;
    let value = tape.scalar(loss)?;
    Ok((value, tape.backward(loss)?))
}

/// Attention probabilities for one sequence, `[layer][head]` row-major `T×T`.
pub fn attention_maps(
    spec: &TransformerSpec,
    params: &ParamVector,
    tokens: &[usize],
) -> Result<Vec<Vec<Tensor>>> {
    let features = Tensor::matrix(1, tokens.len(), tokens.iter().map(|&t| t as f64).collect())?;
    let mut tape = Tape::new();
    let fwd = transformer_forward(&mut tape, spec, params, &features)?;
    Ok(fwd
        .attention
        .iter()
        .map(|layer| layer[0].iter().map(|&v| tape.value(v).clone()).collect())
        .collect())
}

impl Objective for TransformerSpec {
    fn loss(&self, params: &ParamVector, batch: &Batch) -> Result<f64> {
        transformer_loss(self, params, batch)
    }

    fn loss_and_grad(&self, params: &ParamVector, batch: &Batch) -> Result<(f64, GradVector)> {
        transformer_loss_and_grad(self, params, batch)
    }
}
