//! Synthetic tasks and nested subsampling of training splits.

use std::collections::HashSet;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{Batch, LossFn};
use crate::rng::{self, Stream};
use crate::tensor::{GradVector, ParamVector, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[n, d]` real features or `[n, seq_len]` token ids.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub gen_seed: u64,
    pub descriptor: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn as_batch(&self) -> Batch {
        Batch {
            features: self.features.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        Batch {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    fn row_key(&self, i: usize) -> Vec<u64> {
        self.features.row(i).iter().map(|x| x.to_bits()).collect()
    }

    /// Whether any feature row of `self` also appears in `other`.
    pub fn shares_examples_with(&self, other: &Dataset) -> bool {
        let seen: HashSet<Vec<u64>> = (0..other.len()).map(|i| other.row_key(i)).collect();
        (0..self.len()).any(|i| seen.contains(&self.row_key(i)))
    }
}

/// One-dimensional loss with a sharp global minimum and a slightly higher
/// flat minimum, joined by a smooth minimum:
/// `L(x) = -T ln(exp(-S(x)/T) + exp(-F(x)/T))` with
/// `S(x) = ½ a_s (x - c_s)²` and `F(x) = ½ a_f (x - c_f)² + δ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoBasin {
    pub sharp_curvature: f64,
    pub sharp_center: f64,
    pub flat_curvature: f64,
    pub flat_center: f64,
    pub flat_offset: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Basin {
    Sharp,
    Flat,
}

pub fn gen_two_basin_1d() -> TwoBasin {
    TwoBasin {
        sharp_curvature: 50.0,
        sharp_center: -1.0,
        flat_curvature: 1.0,
        flat_center: 2.0,
        flat_offset: 0.05,
        temperature: 0.1,
    }
}

impl TwoBasin {
    fn branches(&self, x: f64) -> (f64, f64) {
        let s = 0.5 * self.sharp_curvature * (x - self.sharp_center).powi(2);
        let f = 0.5 * self.flat_curvature * (x - self.flat_center).powi(2) + self.flat_offset;
        (s, f)
    }

    /// Softmin weights of the sharp and flat branches.
    fn weights(&self, s: f64, f: f64) -> (f64, f64) {
        let m = s.min(f);
        let es = (-(s - m) / self.temperature).exp();
        let ef = (-(f - m) / self.temperature).exp();
        (es / (es + ef), ef / (es + ef))
    }

    pub fn value(&self, x: f64) -> f64 {
        let (s, f) = self.branches(x);
        let m = s.min(f);
        let t = self.temperature;
        m - t * ((-(s - m) / t).exp() + (-(f - m) / t).exp()).ln()
    }

    pub fn derivative(&self, x: f64) -> f64 {
        let (s, f) = self.branches(x);
        let (ws, wf) = self.weights(s, f);
        ws * self.sharp_curvature * (x - self.sharp_center)
            + wf * self.flat_curvature * (x - self.flat_center)
    }

    /// The branch with the lower value at `x`.
    pub fn basin(&self, x: f64) -> Basin {
        let (s, f) = self.branches(x);
        if s < f {
            Basin::Sharp
        } else {
            Basin::Flat
        }
    }

    pub fn params(x: f64) -> ParamVector {
        ParamVector::new(vec![("x".into(), Tensor::vector(vec![x]))]).expect("single entry")
    }

    fn read(params: &ParamVector) -> Result<f64> {
        match params.flatten()[..] {
            [x] => Ok(x),
            ref other => Err(Error::Length {
                expected: 1,
                actual: other.len(),
            }),
        }
    }
}

impl LossFn for TwoBasin {
    fn loss(&self, params: &ParamVector) -> Result<f64> {
        Ok(self.value(Self::read(params)?))
    }

    fn loss_and_grad(&self, params: &ParamVector) -> Result<(f64, GradVector)> {
        let x = Self::read(params)?;
        Ok((
            self.value(x),
            GradVector::from_flat(&[self.derivative(x)], params)?,
        ))
    }
}

/// Two interleaved Archimedean spirals. Point `k` has angle `θ_k` uniform in
/// `[0, 3π]` and radius `θ_k / 3π`; class 1 is class 0 rotated by π. Rows
/// alternate class 0, class 1 for each `k`. Gaussian noise of standard
/// deviation `noise_sigma` is added to every coordinate.
pub fn gen_spirals(n_per_class: usize, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    spirals_from_stream(
        n_per_class,
        noise_sigma,
        seed,
        Split::Train,
        &HashSet::new(),
    )
}

/// Train and test spirals drawn from separate streams; test points that
/// coincide exactly with a training point are redrawn.
pub fn gen_spirals_split(
    n_train_per_class: usize,
    n_test_per_class: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let train = gen_spirals(n_train_per_class, noise_sigma, seed)?;
    let seen: HashSet<Vec<u64>> = (0..train.len()).map(|i| train.row_key(i)).collect();
    let test = spirals_from_stream(n_test_per_class, noise_sigma, seed, Split::Test, &seen)?;
    Ok((train, test))
}

fn spirals_from_stream(
    n_per_class: usize,
    noise_sigma: f64,
    seed: u64,
    split: Split,
    exclude: &HashSet<Vec<u64>>,
) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::config("n_per_class must be at least 1"));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::config(format!(
            "noise_sigma must be ≥ 0, got {noise_sigma}"
        )));
    }
    let purpose = match split {
        Split::Train => "spirals/train",
        Split::Test => "spirals/test",
    };
    let mut angles = Stream::new(seed, 0, purpose);
    let mut noise = Stream::new(seed, 1, purpose);
    let mut rejections = Rejections::default();
    let mut data = Vec::with_capacity(4 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    while labels.len() < 2 * n_per_class {
        let theta = 3.0 * PI * angles.next_f64();
        let r = theta / (3.0 * PI);
        let (x, y) = (r * theta.cos(), r * theta.sin());
        let p0 = [
            x + noise_sigma * noise.normal(),
            y + noise_sigma * noise.normal(),
        ];
        let p1 = [
            -x + noise_sigma * noise.normal(),
            -y + noise_sigma * noise.normal(),
        ];
        let key = |p: &[f64; 2]| p.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if exclude.contains(&key(&p0)) || exclude.contains(&key(&p1)) {
            rejections.bump(2 * n_per_class)?;
            continue;
        }
        data.extend_from_slice(&p0);
        data.extend_from_slice(&p1);
        labels.extend_from_slice(&[0, 1]);
    }
    Ok(Dataset {
        features: Tensor::matrix(labels.len(), 2, data)?,
        labels,
        num_classes: 2,
        split,
        gen_seed: seed,
        descriptor: format!("spirals(n_per_class={n_per_class},noise={noise_sigma})"),
    })
}

/// Key-value retrieval: `[k1 v1 k2 v2 … q]` with distinct keys, values
/// uniform over the vocabulary, and the target equal to the value paired with
/// the query key `q`. Sequences of even length start with one random filler
/// token.
pub fn gen_seq_lookup(n: usize, vocab: usize, seq_len: usize, seed: u64) -> Result<Dataset> {
    seq_lookup_from_stream(n, vocab, seq_len, seed, Split::Train, &HashSet::new())
}

/// Train and test lookup sequences with no sequence shared between splits.
pub fn gen_seq_lookup_split(
    n_train: usize,
    n_test: usize,
    vocab: usize,
    seq_len: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let train = gen_seq_lookup(n_train, vocab, seq_len, seed)?;
    let seen: HashSet<Vec<u64>> = (0..train.len()).map(|i| train.row_key(i)).collect();
    let test = seq_lookup_from_stream(n_test, vocab, seq_len, seed, Split::Test, &seen)?;
    Ok((train, test))
}

/// Number of key-value pairs in a lookup sequence of length `seq_len`.
pub fn lookup_pairs(seq_len: usize) -> usize {
    (seq_len - 1) / 2
}

fn seq_lookup_from_stream(
    n: usize,
    vocab: usize,
    seq_len: usize,
    seed: u64,
    split: Split,
    exclude: &HashSet<Vec<u64>>,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::config("n must be at least 1"));
    }
    if vocab < 4 {
        return Err(Error::config(format!(
            "vocab must be at least 4, got {vocab}"
        )));
    }
    if seq_len < 3 {
        return Err(Error::config(format!(
            "seq_len must be at least 3, got {seq_len}"
        )));
    }
    let pairs = lookup_pairs(seq_len);
    if pairs > vocab {
        return Err(Error::config(format!(
            "{pairs} distinct keys do not fit a vocabulary of {vocab}"
        )));
    }
    let purpose = match split {
        Split::Train => "lookup/train",
        Split::Test => "lookup/test",
    };
    let mut rng = Stream::new(seed, 0, purpose);
    let mut rejections = Rejections::default();
    let mut data = Vec::with_capacity(n * seq_len);
    let mut labels = Vec::with_capacity(n);
    let mut seq = Vec::with_capacity(seq_len);
    while labels.len() < n {
        seq.clear();
        if seq_len.is_multiple_of(2) {
            seq.push(rng.index(vocab));
        }
        let keys: Vec<usize> = {
            // random distinct keys in random order
            let mut pool: Vec<usize> = (0..vocab).collect();
            for i in 0..pairs {
                let j = i + rng.index(vocab - i);
                pool.swap(i, j);
            }
            pool.truncate(pairs);
            pool
        };
        let values: Vec<usize> = (0..pairs).map(|_| rng.index(vocab)).collect();
        for (k, v) in keys.iter().zip(&values) {
            seq.push(*k);
            seq.push(*v);
        }
        let q = rng.index(pairs);
        seq.push(keys[q]);
        let row: Vec<f64> = seq.iter().map(|&t| t as f64).collect();
        if exclude.contains(&row.iter().map(|x| x.to_bits()).collect::<Vec<_>>()) {
            rejections.bump(n)?;
            continue;
        }
        data.extend_from_slice(&row);
        labels.push(values[q]);
    }
    Ok(Dataset {
        features: Tensor::matrix(n, seq_len, data)?,
        labels,
        num_classes: vocab,
        split,
        gen_seed: seed,
        descriptor: format!("seq_lookup(n={n},vocab={vocab},seq_len={seq_len})"),
    })
}

/// Bounds redraws when a test split must avoid training examples, so an
/// exhausted example space is reported instead of looping forever.
#[derive(Default)]
struct Rejections(usize);

impl Rejections {
    fn bump(&mut self, wanted: usize) -> Result<()> {
        self.0 += 1;
        if self.0 > 100 * wanted + 1000 {
            return Err(Error::config(format!(
                "could not draw {wanted} test examples disjoint from the training split"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsampleSpec {
    pub rate: f64,
    pub seed: u64,
}

impl SubsampleSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate <= 1.0) {
            return Err(Error::config(format!(
                "subsample rate must lie in (0, 1], got {}",
                self.rate
            )));
        }
        Ok(())
    }

    /// `max(1, floor(rate · n))`; a 1e-9 guard absorbs representation error
    /// in products such as `0.29 · 100`.
    pub fn target_size(&self, n: usize) -> usize {
        ((self.rate * n as f64 + 1e-9).floor() as usize).clamp(1, n)
    }
}

/// Per-example priority used for subsampling: `mix64(key ^ index)` with the
/// key derived from `(seed, 0, "subsample")`.
pub fn subsample_priority(seed: u64, index: usize) -> u64 {
    rng::mix64(rng::derive_key(seed, 0, "subsample") ^ index as u64)
}

/// Keeps the `max(1, floor(rate · n))` examples with the smallest priority,
/// in their original order. The priority ordering does not depend on the
/// rate, so a lower rate always selects a subset of a higher one.
pub fn subsample(dataset: &Dataset, spec: &SubsampleSpec) -> Result<Dataset> {
    spec.validate()?;
    if dataset.split != Split::Train {
        return Err(Error::config("only training splits can be subsampled"));
    }
    let k = spec.target_size(dataset.len());
    let mut order: Vec<(u64, usize)> = (0..dataset.len())
        .map(|i| (subsample_priority(spec.seed, i), i))
        .collect();
    order.sort_unstable();
    let mut keep: Vec<usize> = order[..k].iter().map(|&(_, i)| i).collect();
    keep.sort_unstable();
    let batch = dataset.gather(&keep);
    Ok(Dataset {
        features: batch.features,
        labels: batch.labels,
        num_classes: dataset.num_classes,
        split: Split::Train,
        gen_seed: dataset.gen_seed,
        descriptor: format!(
            "{}|subsample(rate={},seed={})",
            dataset.descriptor, spec.rate, spec.seed
        ),
    })
}
