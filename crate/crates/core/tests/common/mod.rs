#![allow(dead_code)]

use samlab::models::{Activation, MlpSpec, ModelSpec, TransformerSpec};
use samlab::objective::Objective;
use samlab::objective::{Batch, OnBatch};
use samlab::rng::Stream;
use samlab::{LossFn, ParamVector, Tensor};

/// Random real-valued batch with `n` rows of width `d` and labels below `classes`.
pub fn random_batch(seed: u64, n: usize, d: usize, classes: usize) -> Batch {
    let mut rng = Stream::new(seed, 0, "test/batch");
    let data = (0..n * d).map(|_| rng.uniform(-1.5, 1.5)).collect();
    let labels = (0..n).map(|_| rng.index(classes)).collect();
    Batch::new(Tensor::matrix(n, d, data).unwrap(), labels).unwrap()
}

/// Random token batch.
pub fn random_tokens(seed: u64, n: usize, seq_len: usize, vocab: usize) -> Batch {
    let mut rng = Stream::new(seed, 0, "test/tokens");
    let data = (0..n * seq_len).map(|_| rng.index(vocab) as f64).collect();
    let labels = (0..n).map(|_| rng.index(vocab)).collect();
    Batch::new(Tensor::matrix(n, seq_len, data).unwrap(), labels).unwrap()
}

pub fn small_transformer(seed: u64, layers: usize) -> TransformerSpec {
    TransformerSpec {
        vocab_size: 6,
        model_dim: 8,
        num_heads: 2,
        ff_dim: 12,
        max_seq_len: 4,
        init_seed: seed,
        num_layers: layers,
    }
}

/// Model and batch for gradient-check case `i`, cycling through the zoo.
pub fn zoo_case(i: u64) -> (String, ModelSpec, Batch) {
    let seed = 1000 + i;
    match i % 4 {
        0 => (
            "mlp-tanh 2-4-2".into(),
            ModelSpec::Mlp(MlpSpec::new(vec![2, 4, 2], Activation::Tanh, seed)),
            random_batch(seed, 5, 2, 2),
        ),
        1 => (
            "mlp-relu 3-8-6-4".into(),
            ModelSpec::Mlp(MlpSpec::new(vec![3, 8, 6, 4], Activation::Relu, seed)),
            random_batch(seed, 6, 3, 4),
        ),
        2 => (
            "transformer 1 layer".into(),
            ModelSpec::Transformer(small_transformer(seed, 1)),
            random_tokens(seed, 3, 4, 6),
        ),
        _ => (
            "transformer 2 layers".into(),
            ModelSpec::Transformer(small_transformer(seed, 2)),
            random_tokens(seed, 2, 3, 6),
        ),
    }
}

/// Fourth-order central differences,
/// `(8(L(w + h eᵢ) − L(w − h eᵢ)) − (L(w + 2h eᵢ) − L(w − 2h eᵢ))) / 12h`.
/// Truncation error is O(h⁴), so steps can be large enough that roundoff
/// stays small even for tiny gradients.
pub fn central_fd_gradient(
    lossfn: &dyn Fn(&ParamVector) -> f64,
    params: &ParamVector,
    h: f64,
) -> Vec<f64> {
    let w = params.flatten();
    let at = |i: usize, delta: f64| {
        let mut p = w.clone();
        p[i] += delta;
        lossfn(&ParamVector::unflatten(&p, params).unwrap())
    };
    (0..w.len())
        .map(|i| (8.0 * (at(i, h) - at(i, -h)) - (at(i, 2.0 * h) - at(i, -2.0 * h))) / (12.0 * h))
        .collect()
}

/// Largest `|autodiff − fd| / (1e-8 + |fd|)` against [`central_fd_gradient`]
/// at `h = 5e-5`. Wider stencils start to straddle ReLU kinks.
pub fn gradient_error(model: &ModelSpec, batch: &Batch) -> f64 {
    let params = model.init().unwrap();
    let loss = OnBatch::new(model, batch);
    let (_, auto) = loss.loss_and_grad(&params).unwrap();
    let fd = central_fd_gradient(&|p| loss.loss(p).unwrap(), &params, 5e-5);
    auto.flatten()
        .iter()
        .zip(&fd)
        .map(|(a, f)| (a - f).abs() / (1e-8 + f.abs()))
        .fold(0.0, f64::max)
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// SAM gradient composed by hand from the model's loss and gradient:
/// `M = B[micro]` cut into `m` contiguous chunks, chunk `j` perturbs `w`
/// along its own normalized gradient and is descended on shard `j` of `B`.
pub fn brute_force_sam_gradient(
    model: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    micro: &[usize],
    rho: f64,
    m: usize,
) -> Vec<f64> {
    let w = params.flatten();
    let chunk = micro.len() / m;
    let shard = batch.len() / m;
    let mut total = vec![0.0; w.len()];
    for j in 0..m {
        let ascent_rows = &micro[j * chunk..(j + 1) * chunk];
        let (_, g) = model
            .loss_and_grad(params, &batch.select(ascent_rows))
            .unwrap();
        let g = g.flatten();
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        let w_adv: Vec<f64> = w
            .iter()
            .zip(&g)
            .map(|(x, gi)| x + rho * gi / norm)
            .collect();
        let w_adv = ParamVector::unflatten(&w_adv, params).unwrap();
        let descent_rows: Vec<usize> = if m == 1 {
            (0..batch.len()).collect()
        } else {
            (j * shard..(j + 1) * shard).collect()
        };
        let (_, gd) = model
            .loss_and_grad(&w_adv, &batch.select(&descent_rows))
            .unwrap();
        for (t, x) in total.iter_mut().zip(gd.flatten()) {
            *t += x;
        }
    }
    total.iter().map(|t| t / m as f64).collect()
}

/// Element-wise `max |a − b| / max(1, |b|)`.
pub fn max_scaled_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Terminal amplitude `max |x|` over the last `tail` iterates of
/// `x' = x − η a (x + ρ sign x)`.
pub fn sam_quadratic_amplitude(
    a: f64,
    lr: f64,
    rho: f64,
    x0: f64,
    steps: usize,
    tail: usize,
) -> f64 {
    let mut x = x0;
    let mut amp: f64 = 0.0;
    for t in 0..steps {
        let s = if x == 0.0 { 0.0 } else { x.signum() };
        x -= lr * a * (x + rho * s);
        if t + tail >= steps {
            amp = amp.max(x.abs());
        }
    }
    amp
}

/// Spirals MLP(2-16-16-2) config with the harness defaults (AdaFactor 1e-3,
/// b = 128, SAM ρ = 0.15, a = b/4) writing to `output_dir`.
pub fn spirals_config(
    output_dir: &std::path::Path,
    total_steps: u64,
) -> samlab::harness::ExperimentConfig {
    let text = format!(
        r#"{{
          "spec_version": 1,
          "task": {{"kind": "spirals", "n_per_class": 200, "noise_sigma": 0.05, "seed": 3}},
          "model": {{"kind": "mlp", "layer_sizes": [2, 16, 16, 2], "activation": "relu", "init_seed": 0}},
          "optimizer": {{"kind": "adafactor", "learning_rate": 0.001}},
          "total_steps": {total_steps},
          "output_dir": {}
        }}"#,
        serde_json::to_string(output_dir).unwrap()
    );
    samlab::harness::ExperimentConfig::from_json(&text).unwrap()
}

/// Lookup-task transformer (vocab 16, d 32, 2 heads, ff 64, 2 layers) on
/// 2000 training and 500 test sequences of length 5.
pub fn lookup_config(
    output_dir: &std::path::Path,
    total_steps: u64,
) -> samlab::harness::ExperimentConfig {
    let text = format!(
        r#"{{
          "spec_version": 1,
          "task": {{"kind": "seq_lookup", "n_train": 2000, "n_test": 500, "vocab": 16, "seq_len": 5, "seed": 1}},
          "model": {{"kind": "transformer", "vocab_size": 16, "model_dim": 32, "num_heads": 2, "ff_dim": 64,
                     "max_seq_len": 5, "num_layers": 2, "init_seed": 0}},
          "optimizer": {{"kind": "adafactor", "learning_rate": 0.001}},
          "total_steps": {total_steps},
          "output_dir": {}
        }}"#,
        serde_json::to_string(output_dir).unwrap()
    );
    samlab::harness::ExperimentConfig::from_json(&text).unwrap()
}

/// Metrics CSV with the wall-clock column blanked.
pub fn strip_wall_clock(csv: &str) -> String {
    let col = samlab::sam::MetricsRecord::FIELDS
        .iter()
        .position(|f| *f == "step_wall_ms")
        .unwrap();
    csv.lines()
        .skip(1)
        .map(|line| {
            let mut fields: Vec<&str> = line.split(',').collect();
            fields[col] = "";
            fields.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}
