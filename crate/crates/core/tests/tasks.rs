use std::collections::HashSet;

use samlab::harness::draw_batch;
use samlab::models::{Activation, MlpSpec, ModelSpec, TransformerSpec};
use samlab::optim::{state_init, OptimizerConfig};
use samlab::rng::Stream;
use samlab::sam::{sam_train_step, SamConfig, ASCENT_STREAM};
use samlab::tasks::{
    gen_seq_lookup, gen_seq_lookup_split, gen_spirals, gen_two_basin_1d, lookup_pairs, subsample,
    subsample_priority, Dataset, SubsampleSpec,
};
use samlab::{Exec, ParamVector};

fn train_plain(
    model: &ModelSpec,
    train: &Dataset,
    opt: &OptimizerConfig,
    steps: u64,
    seed: u64,
) -> ParamVector {
    let mut params = model.init().unwrap();
    let mut state = state_init(opt, &params);
    let sam = SamConfig::disabled();
    for step in 1..=steps {
        let batch = draw_batch(train, 128, seed, step);
        let mut rng = Stream::new(seed, step, ASCENT_STREAM);
        let out = sam_train_step(
            model,
            &params,
            &batch,
            &sam,
            opt,
            &state,
            &mut rng,
            Exec::Parallel,
        )
        .unwrap();
        (params, state) = (out.params, out.opt_state);
    }
    params
}

#[test]
fn two_basin_centers_are_stationary_and_sharp_one_is_curved() {
    let tb = gen_two_basin_1d();
    let h = 1e-5;
    let fd1 = |x: f64| (tb.value(x + h) - tb.value(x - h)) / (2.0 * h);
    let fd2 = |x: f64| {
        let h = 1e-4;
        (tb.value(x + h) - 2.0 * tb.value(x) + tb.value(x - h)) / (h * h)
    };
    for c in [tb.sharp_center, tb.flat_center] {
        assert!(fd1(c).abs() < 1e-3, "L'({c}) = {}", fd1(c));
        assert!((tb.derivative(c) - fd1(c)).abs() < 1e-6);
    }
    assert!(tb.value(tb.sharp_center) < tb.value(tb.flat_center));
    let ratio = fd2(tb.sharp_center) / fd2(tb.flat_center);
    assert!(ratio >= 10.0, "curvature ratio {ratio}");
}

#[test]
fn spirals_fixture_is_learnable() {
    let train = gen_spirals(200, 0.05, 3).unwrap();
    let model = ModelSpec::Mlp(MlpSpec::new(vec![2, 16, 16, 2], Activation::Relu, 0));
    let params = train_plain(
        &model,
        &train,
        &OptimizerConfig::momentum(0.05, 0.9),
        2000,
        0,
    );
    let acc = model.accuracy(&params, &train.as_batch()).unwrap();
    assert!(acc > 0.95, "train accuracy {acc}");
}

#[test]
fn lookup_majority_baseline_is_near_chance() {
    let vocab = 16;
    let d = gen_seq_lookup(4000, vocab, 5, 2).unwrap();
    let mut counts = vec![0usize; vocab];
    for &l in &d.labels {
        counts[l] += 1;
    }
    let majority = *counts.iter().max().unwrap() as f64 / d.len() as f64;
    let chance = 1.0 / vocab as f64;
    assert!(majority >= chance);
    assert!(majority < chance * 1.3, "majority accuracy {majority}");
}

#[test]
fn lookup_targets_follow_the_query() {
    let d = gen_seq_lookup(300, 10, 7, 4).unwrap();
    let pairs = lookup_pairs(7);
    for i in 0..d.len() {
        let row: Vec<usize> = d.features.row(i).iter().map(|&t| t as usize).collect();
        let query = row[6];
        let keys: Vec<usize> = (0..pairs).map(|p| row[2 * p]).collect();
        assert_eq!(keys.iter().collect::<HashSet<_>>().len(), pairs);
        let p = keys.iter().position(|&k| k == query).unwrap();
        assert_eq!(d.labels[i], row[2 * p + 1]);
    }
}

#[test]
fn transformer_learns_lookup() {
    let (train, test) = gen_seq_lookup_split(2000, 500, 16, 5, 1).unwrap();
    let model = ModelSpec::Transformer(TransformerSpec {
        vocab_size: 16,
        model_dim: 32,
        num_heads: 2,
        ff_dim: 64,
        max_seq_len: 5,
        num_layers: 2,
        init_seed: 0,
    });
    let params = train_plain(&model, &train, &OptimizerConfig::adafactor(1e-2), 800, 0);
    let train_acc = model.accuracy(&params, &train.as_batch()).unwrap();
    let test_acc = model.accuracy(&params, &test.as_batch()).unwrap();
    assert!(train_acc > 0.9, "train accuracy {train_acc}");
    assert!(test_acc > 0.9, "test accuracy {test_acc}");
}

#[test]
fn subsample_rates_are_nested() {
    let train = gen_spirals(500, 0.05, 8).unwrap();
    let rates = [0.02, 0.05, 0.1, 0.2, 0.4, 0.8];
    let subsets: Vec<Dataset> = rates
        .iter()
        .map(|&rate| subsample(&train, &SubsampleSpec { rate, seed: 5 }).unwrap())
        .collect();
    let row_set = |d: &Dataset| -> HashSet<Vec<u64>> {
        (0..d.len())
            .map(|i| d.features.row(i).iter().map(|v| v.to_bits()).collect())
            .collect()
    };
    for (i, small) in subsets.iter().enumerate() {
        assert_eq!(small.len(), (rates[i] * 1000.0).floor() as usize);
        for large in &subsets[i..] {
            assert!(row_set(small).is_subset(&row_set(large)));
        }
    }

    // replay: the kept indices are the smallest priorities, in original order
    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| subsample_priority(5, i));
    let mut keep: Vec<usize> = order[..20].to_vec();
    keep.sort_unstable();
    let want = train.gather(&keep);
    assert_eq!(subsets[0].features, want.features);
    assert_eq!(subsets[0].labels, want.labels);
}

#[test]
fn subsample_leaves_test_split_alone() {
    let (_, test) = gen_seq_lookup_split(200, 50, 8, 5, 3).unwrap();
    assert!(subsample(&test, &SubsampleSpec { rate: 0.5, seed: 0 }).is_err());
}
