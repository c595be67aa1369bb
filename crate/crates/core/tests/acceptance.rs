//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 3 9`.

mod common;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{
    brute_force_sam_gradient, gradient_error, lookup_config, max_scaled_diff, median, random_batch,
    spirals_config, zoo_case,
};
use samlab::harness::checkpoint::encode;
use samlab::harness::metrics::metrics_header;
use samlab::harness::{
    load_checkpoint, measure_overhead, run_experiment, save_checkpoint, sweep, SweepAxis,
    SWEEP_HEADER,
};
use samlab::models::{Activation, MlpSpec, ModelSpec};
use samlab::objective::{DataFree, DiagonalQuadratic, Objective, OnBatch};
use samlab::optim::{opt_step, state_init, OptimizerConfig};
use samlab::rng::Stream;
use samlab::sam::{
    compute_ascent_point, sam_gradient, sam_train_step, sample_ascent_microbatch, SamConfig,
    ASCENT_STREAM,
};
use samlab::sharpness::{hessian_top_eigenvalue, sharpness_probe};
use samlab::tasks::{gen_two_basin_1d, Basin, TwoBasin};
use samlab::{Batch, Exec, ParamVector, Tensor};
use tempfile::tempdir;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Outcome,
}

fn minutes(m: u64) -> Option<Duration> {
    Some(Duration::from_secs(60 * m))
}

fn main() {
    let criteria = [
        Criterion {
            id: 1,
            name: "gradient correctness",
            budget: minutes(1),
            run: gradient_correctness,
        },
        Criterion {
            id: 2,
            name: "ascent step fidelity",
            budget: minutes(1),
            run: ascent_fidelity,
        },
        Criterion {
            id: 3,
            name: "closed-form SAM-SGD step",
            budget: None,
            run: closed_form_step,
        },
        Criterion {
            id: 4,
            name: "flat-basin selection",
            budget: minutes(2),
            run: flat_basin_selection,
        },
        Criterion {
            id: 5,
            name: "sharpness reduction",
            budget: minutes(15),
            run: sharpness_reduction,
        },
        Criterion {
            id: 6,
            name: "data-limited sweep shape",
            budget: minutes(45),
            run: data_limited_sweep,
        },
        Criterion {
            id: 7,
            name: "rho sweep shape",
            budget: minutes(30),
            run: rho_sweep,
        },
        Criterion {
            id: 8,
            name: "overhead",
            budget: minutes(10),
            run: overhead,
        },
        Criterion {
            id: 9,
            name: "instrument calibration",
            budget: None,
            run: instrument_calibration,
        },
        Criterion {
            id: 10,
            name: "format stability",
            budget: None,
            run: format_stability,
        },
    ];
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    panic::set_hook(Box::new(|info| eprintln!("{info}")));

    let mut failed = 0;
    for c in criteria
        .iter()
        .filter(|c| selected.is_empty() || selected.contains(&c.id))
    {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(c.run))
            .unwrap_or_else(|_| outcome(false, "panicked"));
        let elapsed = start.elapsed();
        let mut pass = result.pass;
        let mut detail = result.detail;
        if let Some(budget) = c.budget {
            if elapsed > budget {
                pass = false;
                detail.push_str(&format!("; over the {} s budget", budget.as_secs()));
            }
        }
        if !pass {
            failed += 1;
        }
        println!(
            "{} criterion {:>2} {}: {} [{:.1} s]",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            detail,
            elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn gradient_correctness() -> Outcome {
    let mut worst = (0.0, String::new());
    for i in 0..100 {
        let (name, model, batch) = zoo_case(i);
        let err = gradient_error(&model, &batch);
        if err > worst.0 {
            worst = (err, format!("{name}, case {i}"));
        }
    }
    outcome(
        worst.0 < 1e-5,
        format!("max relative error {:.2e} ({})", worst.0, worst.1),
    )
}

fn ascent_fidelity() -> Outcome {
    // (a) perturbation norm over random models, batches and radii
    let mut norm_err: f64 = 0.0;
    let mut rng = Stream::new(2, 0, "acceptance/eps");
    for i in 0..1000u64 {
        let (_, model, batch) = zoo_case(i % 4 + 4 * (i % 25));
        let params = model.init().unwrap();
        let params = perturb(&params, &mut rng, 0.1);
        let (_, g) = model.loss_and_grad(&params, &batch).unwrap();
        let rho = 10f64.powf(rng.uniform(-3.0, 0.0));
        let (w_adv, asc) = compute_ascent_point(&params, &g, rho, 1e-12).unwrap();
        if asc.skipped {
            continue;
        }
        let d = w_adv.add_scaled(&params, -1.0).unwrap().norm();
        norm_err = norm_err.max((d / rho - 1.0).abs());
    }

    // (b) disabled SAM against the bare optimizer, bit for bit
    let model = ModelSpec::Mlp(MlpSpec::new(vec![2, 16, 16, 2], Activation::Relu, 1));
    let opt = OptimizerConfig::adafactor(1e-3);
    let mut p_base = model.init().unwrap();
    let mut s_base = state_init(&opt, &p_base);
    let (mut p_off, mut s_off) = (p_base.clone(), s_base.clone());
    let mut rng_untouched = true;
    for step in 1..=50u64 {
        let batch = random_batch(step, 32, 2, 2);
        let (_, g) = model.loss_and_grad(&p_base, &batch).unwrap();
        (s_base, p_base) = opt_step(&opt, &s_base, &p_base, &g).unwrap();
        let mut rng = Stream::new(1, step, ASCENT_STREAM);
        let out = sam_train_step(
            &model,
            &p_off,
            &batch,
            &SamConfig::disabled(),
            &opt,
            &s_off,
            &mut rng,
            Exec::Parallel,
        )
        .unwrap();
        rng_untouched &= rng.position() == 0;
        (p_off, s_off) = (out.params, out.opt_state);
    }
    let identical = p_base == p_off && rng_untouched;

    // (c) m-sharpness against hand composition
    let mut oracle_err: f64 = 0.0;
    for b in [2usize, 4, 6, 8] {
        for m in [1usize, 2, 4] {
            for a in 1..=b {
                if a % m != 0 || b % m != 0 {
                    continue;
                }
                let seed = (b * 100 + m * 10 + a) as u64;
                let model = ModelSpec::Mlp(MlpSpec::new(vec![3, 6, 4], Activation::Tanh, seed));
                let params = model.init().unwrap();
                let batch = random_batch(seed, b, 3, 4);
                let cfg = SamConfig {
                    ascent_size: Some(a),
                    m,
                    ..SamConfig::with_rho(0.15)
                };
                let mut rng = Stream::new(seed, 3, ASCENT_STREAM);
                let micro = sample_ascent_microbatch(&batch, a, &mut rng.clone()).unwrap();
                let (g, _) =
                    sam_gradient(&model, &params, &batch, &cfg, &mut rng, Exec::Parallel).unwrap();
                let want =
                    brute_force_sam_gradient(&model, &params, &batch, &micro.indices, 0.15, m);
                oracle_err = oracle_err.max(max_scaled_diff(&g.flatten(), &want));
            }
        }
    }
    outcome(
        norm_err <= 1e-9 && identical && oracle_err <= 1e-12,
        format!(
            "(a) max |‖w_adv − w‖/ρ − 1| = {norm_err:.1e}; (b) disabled path bit-identical: {identical}; \
             (c) max m-sharpness deviation {oracle_err:.1e}"
        ),
    )
}

fn perturb(params: &ParamVector, rng: &mut Stream, scale: f64) -> ParamVector {
    let flat: Vec<f64> = params
        .flatten()
        .iter()
        .map(|w| w + scale * rng.normal())
        .collect();
    ParamVector::unflatten(&flat, params).unwrap()
}

fn closed_form_step() -> Outcome {
    let loss = DataFree(DiagonalQuadratic::new(vec![4.0]));
    let params = ParamVector::new(vec![("w".into(), Tensor::vector(vec![1.0]))]).unwrap();
    let opt = OptimizerConfig::sgd(0.05);
    let state = state_init(&opt, &params);
    let mut rng = Stream::new(0, 1, ASCENT_STREAM);
    let cfg = SamConfig::with_rho(0.1);
    let out = sam_train_step(
        &loss,
        &params,
        &Batch::unit(),
        &cfg,
        &opt,
        &state,
        &mut rng,
        Exec::Sequential,
    )
    .unwrap();
    let w = out.params.flatten()[0];
    outcome(w == 0.78, format!("w′ = {w:?}"))
}

fn descend_two_basin(tb: &TwoBasin, x0: f64, sam: &SamConfig) -> Basin {
    let loss = DataFree(*tb);
    let opt = OptimizerConfig::sgd(0.01);
    let mut params = TwoBasin::params(x0);
    let mut state = state_init(&opt, &params);
    let batch = Batch::unit();
    for step in 1..=2000 {
        let mut rng = Stream::new(0, step, ASCENT_STREAM);
        let out = sam_train_step(
            &loss,
            &params,
            &batch,
            sam,
            &opt,
            &state,
            &mut rng,
            Exec::Sequential,
        )
        .unwrap();
        (params, state) = (out.params, out.opt_state);
    }
    tb.basin(params.flatten()[0])
}

fn flat_basin_selection() -> Outcome {
    let tb = gen_two_basin_1d();
    let grid: Vec<f64> = (0..=200).map(|i| -3.0 + 8.0 * i as f64 / 200.0).collect();
    let count = |sam: &SamConfig| {
        grid.iter()
            .filter(|&&x| descend_two_basin(&tb, x, sam) == Basin::Flat)
            .count()
    };
    let sgd = count(&SamConfig::disabled());
    let sam = count(&SamConfig::with_rho(0.3));
    outcome(
        sam > sgd,
        format!(
            "flat basin reached from {sam}/{n} starts with SAM vs {sgd}/{n} with SGD (lr 0.01)",
            n = grid.len()
        ),
    )
}

fn sharpness_reduction() -> Outcome {
    let dir = tempdir().unwrap();
    let mut probes = [Vec::new(), Vec::new()];
    for seed in 0..8 {
        for (arm, sam) in [false, true].into_iter().enumerate() {
            let mut cfg = spirals_config(&dir.path().join(format!("{seed}-{sam}")), 2000);
            cfg.run_seed = seed;
            cfg.sam.enabled = sam;
            let out = run_experiment(&cfg).unwrap();
            let (train, _) = cfg.datasets().unwrap();
            let batch = train.as_batch();
            let model = cfg.model.with_init_seed(cfg.init_seed());
            let loss = OnBatch::new(&model, &batch);
            let r =
                sharpness_probe(&loss, &out.final_params, 0.15, 10, 4, 0, Exec::Parallel).unwrap();
            probes[arm].push(r.worst_case_increase);
        }
    }
    let (base, sam) = (median(probes[0].clone()), median(probes[1].clone()));
    outcome(
        sam < base,
        format!("median probe(ρ=0.15): SAM {sam:.4} vs baseline {base:.4} over 8 seeds"),
    )
}

fn data_limited_sweep() -> Outcome {
    let dir = tempdir().unwrap();
    let mut base = lookup_config(dir.path(), 800);
    base.optimizer = OptimizerConfig::adafactor(1e-2);
    base.sam.trace_base_loss = false;
    let rates = SweepAxis::Subsample.default_values();
    let seeds: Vec<u64> = (0..5).collect();
    let result = sweep(
        &base,
        SweepAxis::Subsample,
        &rates,
        &seeds,
        true,
        Exec::Parallel,
    )
    .unwrap();
    if let Some(bad) = result.rows.iter().find(|r| !r.is_ok()) {
        return outcome(false, format!("cell failed: {}", bad.status));
    }
    let mut all_ge = true;
    let mut best = (f64::NEG_INFINITY, 0.0);
    let mut cells = Vec::new();
    for &rate in &rates {
        let sam = result.mean_best_accuracy(Some(rate), true).unwrap();
        let base = result.baseline_accuracy(rate).unwrap();
        all_ge &= sam >= base;
        let rel = (sam - base) / base;
        if rel > best.0 {
            best = (rel, rate);
        }
        cells.push(format!("{:.0}%: {sam:.4}/{base:.4}", rate * 100.0));
    }
    outcome(
        all_ge && best.1 <= 0.4,
        format!(
            "SAM/baseline mean best accuracy {}; largest relative gain {:+.1}% at {:.0}%",
            cells.join(", "),
            best.0 * 100.0,
            best.1 * 100.0
        ),
    )
}

fn rho_sweep() -> Outcome {
    let dir = tempdir().unwrap();
    let mut base = spirals_config(dir.path(), 2000);
    base.optimizer = OptimizerConfig::momentum(0.05, 0.9);
    let rhos = SweepAxis::Rho.default_values();
    let seeds: Vec<u64> = (0..5).collect();
    let result = sweep(&base, SweepAxis::Rho, &rhos, &seeds, true, Exec::Parallel).unwrap();
    if let Some(bad) = result.rows.iter().find(|r| !r.is_ok()) {
        return outcome(false, format!("cell failed: {}", bad.status));
    }
    let baseline = result.mean_best_accuracy(None, false).unwrap();
    let mut pass = true;
    let mut cells = Vec::new();
    for &rho in &rhos {
        let acc = result.mean_best_accuracy(Some(rho), true).unwrap();
        pass &= acc >= baseline - 0.005;
        cells.push(format!("ρ={rho}: {acc:.4}"));
    }
    outcome(
        pass,
        format!(
            "baseline {baseline:.4}; {} (margin 0.005)",
            cells.join(", ")
        ),
    )
}

fn overhead() -> Outcome {
    let dir = tempdir().unwrap();
    let quarter = lookup_config(&dir.path().join("quarter"), 1);
    let mut full = lookup_config(&dir.path().join("full"), 1);
    full.sam.ascent_size = Some(full.batch_size);
    let q = measure_overhead(&quarter).unwrap();
    let f = measure_overhead(&full).unwrap();
    outcome(
        (1.1..=1.45).contains(&q.ratio) && (f.ratio - 2.0).abs() <= 0.25,
        format!(
            "a = b/4: {:.3} ({:.2} vs {:.2} ms); a = b: {:.3} ({:.2} vs {:.2} ms)",
            q.ratio,
            q.sam_median_ms,
            q.baseline_median_ms,
            f.ratio,
            f.sam_median_ms,
            f.baseline_median_ms
        ),
    )
}

fn instrument_calibration() -> Outcome {
    let mut probe_worst: f64 = 0.0;
    for (a, rho, dim) in [
        (1.0, 0.15, 2),
        (4.0, 0.1, 8),
        (20.0, 0.05, 30),
        (0.5, 0.3, 100),
    ] {
        let q = DiagonalQuadratic::new(vec![a; dim]);
        let w = ParamVector::new(vec![("w".into(), Tensor::zeros(&[dim]))]).unwrap();
        let r = sharpness_probe(&q, &w, rho, 10, 4, 0, Exec::Parallel).unwrap();
        let exact = 0.5 * a * rho * rho;
        let rel = (r.worst_case_increase - exact).abs() / exact;
        probe_worst = probe_worst.max(if r.worst_case_increase > exact + 1e-9 {
            f64::INFINITY
        } else {
            rel
        });
    }
    let mut hess_worst: f64 = 0.0;
    for curv in [
        vec![4.0, 1.0],
        vec![9.0, 5.0, 2.0, 0.1],
        vec![0.7, 0.2, 0.2, 0.1, 0.05],
    ] {
        let top = curv.iter().cloned().fold(f64::MIN, f64::max);
        let w =
            ParamVector::new(vec![("w".into(), Tensor::vector(vec![0.3; curv.len()]))]).unwrap();
        let est = hessian_top_eigenvalue(&DiagonalQuadratic::new(curv), &w, 100, 1e-4, 1).unwrap();
        hess_worst = hess_worst.max((est - top).abs() / top);
    }
    outcome(
        probe_worst <= 0.02 && hess_worst <= 0.01,
        format!(
            "probe within {:.2}% of ½aρ²; Hessian within {:.2e}% of the top eigenvalue",
            probe_worst * 100.0,
            hess_worst * 100.0
        ),
    )
}

fn format_stability() -> Outcome {
    let dir = tempdir().unwrap();
    let model = ModelSpec::Transformer(common::small_transformer(5, 2));
    let params = model.init().unwrap();
    let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&params, &p1).unwrap();
    let loaded = load_checkpoint(&p1).unwrap();
    save_checkpoint(&loaded, &p2).unwrap();
    let round_trip = loaded == params && fs::read(&p1).unwrap() == fs::read(&p2).unwrap();

    let fixture =
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/reference.ckpt");
    let ref_params = load_checkpoint(&fixture).unwrap();
    let want = ParamVector::new(vec![
        (
            "layer00.bias".into(),
            Tensor::vector(vec![0.5, -0.0, f64::from_bits(1)]),
        ),
        (
            "layer00.weight".into(),
            Tensor::matrix(2, 3, vec![0.125, 0.25, 0.375, 0.5, 0.625, 0.75]).unwrap(),
        ),
        ("temperature".into(), Tensor::scalar(std::f64::consts::PI)),
    ])
    .unwrap();
    let bits = |p: &ParamVector| p.flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let fixture_ok = bits(&ref_params) == bits(&want)
        && ref_params.is_congruent(&want)
        && encode(&ref_params).unwrap() == fs::read(&fixture).unwrap();

    let headers = metrics_header()
        == "step,train_loss,eval_loss,eval_accuracy,ascent_grad_norm,adv_loss_gap,step_wall_ms,skipped_ascent_count"
        && SWEEP_HEADER
            == "axis,value,seed,sam,best_eval_accuracy,best_step,best_eval_loss,final_eval_accuracy,mean_step_wall_ms,status";
    outcome(
        round_trip && fixture_ok && headers,
        format!("round trip byte-identical: {round_trip}; fixture: {fixture_ok}; golden headers: {headers}"),
    )
}
