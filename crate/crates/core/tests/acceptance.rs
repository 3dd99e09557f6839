//! End-to-end acceptance checks. Each test prints one
//! `criterion N PASS|FAIL name: detail` line before asserting.
//!
//! Run with `cargo test -p ssgp --test acceptance -- --nocapture --test-threads 1`
//! to see the lines in order.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use ssgp::data::{synth_scene, NoiseKind, Sample, SceneParams, Task};
use ssgp::evaluation::{
    evaluate, evaluate_predictions, metric_koe, metric_orr, sweep_density, sweep_noise, EvalOptions, NearestFill, Predictor,
};
use ssgp::layers::{Activation, Conv2d};
use ssgp::network::{accounting, build_model, Guidance, Model, ModelConfig};
use ssgp::param::{InitMode, ParamStore};
use ssgp::propagation::{cspn_refine, stability_transform, AffinityField};
use ssgp::sparse::is_binary;
use ssgp::training::{stream_seed, train, MemorySource, Sparsification, TrainConfig};
use ssgp::{Graph, MaskedFeature, Shape, Tensor};

use common::{grads, oracle, random, random_sparse, rng, verdict};

// ---------------------------------------------------------------- 1

#[test]
fn c01_oracle_equivalence() {
    let start = Instant::now();
    let mut r = rng(101);
    let (mut conv, mut pool, mut prop) = (0f64, 0f64, 0f64);
    let mut mask_mismatch = 0;
    for _ in 0..1000 {
        let (c, h, w) = (r.gen_range(1..=4), r.gen_range(1..=8), r.gen_range(1..=8));
        let input = random_sparse::<f32>(c, h, w, r.gen_range(0.05..0.9), &mut r);

        let k = [1, 3, 5][r.gen_range(0..3)];
        let stride = r.gen_range(1..=2);
        let c_out = r.gen_range(1..=4);
        let mut store = ParamStore::<f32>::new();
        let layer = Conv2d::new(&mut store, &mut r, "c", c, c_out, k, stride, InitMode::ReluScaled).unwrap();
        for id in [layer.weight, layer.bias] {
            store.get_mut(id).value.iter_mut().for_each(|v| *v = r.gen_range(-1.0..1.0));
        }
        let mut g = Graph::<f32>::new();
        let x = g.masked_input(&input);
        let y = g.sparse_conv2d(&store, &layer, &x, Activation::Linear).unwrap();
        let got = g.masked_value(&y);
        let (want, want_mask) = oracle::sparse_conv(&input.features, &input.mask, &store.get(layer.weight).value, &store.get(layer.bias).value, c_out, k, stride);
        conv = conv.max(oracle::max_abs_diff(&got.features, &want));
        mask_mismatch += usize::from(oracle::max_abs_diff(&got.mask, &want_mask) != 0.0);

        let p = g.sparse_avg_pool(&x).unwrap();
        let got = g.masked_value(&p);
        let (want, want_mask) = oracle::avg_pool(&input.features, &input.mask);
        pool = pool.max(oracle::max_abs_diff(&got.features, &want));
        mask_mismatch += usize::from(oracle::max_abs_diff(&got.mask, &want_mask) != 0.0);

        let per_channel = r.gen_bool(0.5);
        let kp = if r.gen_bool(0.7) { 3 } else { 5 };
        let ac = if per_channel { c * (kp * kp - 1) } else { kp * kp - 1 };
        let aff = random::<f32>(Shape::new(ac, h, w), &mut r);
        let av = g.input(aff.clone());
        let out = g.propagate(&x, av, kp, per_channel).unwrap();
        let got = g.masked_value(&out);
        let (want, want_mask) = oracle::propagate(&input.features, &input.mask, &aff, kp, per_channel);
        prop = prop.max(oracle::max_abs_diff(&got.features, &want));
        mask_mismatch += usize::from(oracle::max_abs_diff(&got.mask, &want_mask) != 0.0);
    }
    let secs = start.elapsed().as_secs_f64();
    let worst = conv.max(pool).max(prop);
    verdict(
        1,
        "oracle equivalence",
        worst <= 1e-5 && mask_mismatch == 0 && secs < 30.0,
        &format!("1000 f32 fixtures, max abs error conv {conv:.1e} pool {pool:.1e} propagate {prop:.1e}, {mask_mismatch} mask mismatches, {secs:.1}s"),
    );
}

// ---------------------------------------------------------------- 2

#[test]
fn c02_gradient_suite() {
    let start = Instant::now();
    let ops = grads::all_ops();
    let failing: Vec<_> = ops.iter().filter(|(_, rep, tol)| !rep.passes(*tol)).map(|c| c.0.clone()).collect();
    let worst_op = ops.iter().map(|c| c.1.max_rel_error).fold(0.0, f64::max);
    let e2e = grads::end_to_end(16);
    let secs = start.elapsed().as_secs_f64();
    let ok = failing.is_empty() && e2e.1.passes(grads::END_TO_END_TOL) && secs < 300.0;
    verdict(
        2,
        "gradient suite",
        ok,
        &format!(
            "{} op checks, worst relative error {worst_op:.1e}{}; 16x16 model {:.1e} over {} coordinates; {secs:.1}s",
            ops.len(),
            if failing.is_empty() { String::new() } else { format!(", failing {failing:?}") },
            e2e.1.max_rel_error,
            e2e.1.checked
        ),
    );
}

// ---------------------------------------------------------------- 3

fn scramble_invalid(m: &MaskedFeature<f32>, r: &mut rand_chacha::ChaCha8Rng) -> MaskedFeature<f32> {
    let mut out = m.clone();
    let s = m.shape();
    for c in 0..s.c {
        for i in 0..s.plane() {
            if m.mask.data()[i] == 0.0 {
                out.features.channel_mut(c)[i] = r.gen_range(-1e3..1e3);
            }
        }
    }
    out
}

#[test]
fn c03_sparsity_invariants() {
    let mut r = rng(103);
    let mut changed = 0;
    let mut non_binary = 0;
    let mut isolated_err = 0f64;
    let mut reduction = 0f64;

    let model = build_model::<f32>(&ModelConfig::toy(2), 3).unwrap();
    for trial in 0..40 {
        // masked-value independence through single ops and a whole model
        let input = random_sparse::<f32>(2, 12, 10, 0.3, &mut r);
        let other = scramble_invalid(&input, &mut r);
        let mut store = ParamStore::<f32>::new();
        let layer = Conv2d::new(&mut store, &mut r, "c", 2, 3, 3, 1 + trial % 2, InitMode::MaskNormalized).unwrap();
        let aff = random::<f32>(Shape::new(8, 12, 10), &mut r);
        let run = |m: &MaskedFeature<f32>| {
            let mut g = Graph::new();
            let x = g.masked_input(m);
            let y = g.sparse_conv2d(&store, &layer, &x, Activation::Relu).unwrap();
            let p = g.sparse_avg_pool(&x).unwrap();
            let a = g.input(aff.clone());
            let q = g.propagate(&x, a, 3, false).unwrap();
            [g.masked_value(&y), g.masked_value(&p), g.masked_value(&q)]
        };
        let (ra, rb) = (run(&input), run(&other));
        changed += ra.iter().zip(&rb).filter(|(a, b)| a != b).count();
        non_binary += ra.iter().filter(|m| !is_binary(&m.mask)).count();

        let image = random::<f32>(Shape::new(3, 12, 10), &mut r);
        let a = model.forward(&image, &input).unwrap();
        let b = model.forward(&image, &other).unwrap();
        changed += usize::from(a.dense != b.dense);
        non_binary += usize::from(!is_binary(&a.final_mask));

        // a valid pixel with no valid neighbour keeps its value
        let mut lone = MaskedFeature::new(Tensor::zeros(Shape::new(3, 7, 7)), Tensor::zeros(Shape::new(1, 7, 7))).unwrap();
        let (y, x) = (r.gen_range(0..7), r.gen_range(0..7));
        lone.mask.set(0, y, x, 1.0);
        for c in 0..3 {
            lone.features.set(c, y, x, r.gen_range(-5.0..5.0));
        }
        let lone = scramble_invalid(&lone, &mut r);
        let mut g = Graph::new();
        let xv = g.masked_input(&lone);
        let av = g.input(random::<f32>(Shape::new(24, 7, 7), &mut r));
        let out = g.propagate(&xv, av, 3, true).unwrap();
        let out = g.masked_value(&out);
        for c in 0..3 {
            isolated_err = isolated_err.max((out.features.get(c, y, x) - lone.features.get(c, y, x)).abs() as f64);
        }

        // all-ones mask: dense convolution divided by the in-bounds tap count
        let dense = MaskedFeature::dense(random::<f32>(Shape::new(2, 9, 8), &mut r));
        let mut g = Graph::new();
        let xv = g.masked_input(&dense);
        let sparse_out = g.sparse_conv2d(&store, &layer, &xv, Activation::Linear).unwrap();
        let sparse_out = g.masked_value(&sparse_out);
        let xd = g.input(dense.features.clone());
        let conv_out = g.conv2d(&store, &layer, xd, Activation::Linear).unwrap();
        let conv_out = g.value(conv_out).clone();
        let bias = &store.get(layer.bias).value;
        let stride = 1 + trial % 2;
        let so = conv_out.shape();
        for c in 0..so.c {
            for oy in 0..so.h {
                for ox in 0..so.w {
                    let rows = (0..3).filter(|d| (oy * stride + d).checked_sub(1).is_some_and(|v| v < 9)).count();
                    let cols = (0..3).filter(|d| (ox * stride + d).checked_sub(1).is_some_and(|v| v < 8)).count();
                    let b = bias[c] as f64;
                    let want = (conv_out.get(c, oy, ox) as f64 - b) / (rows * cols) as f64 + b;
                    reduction = reduction.max((sparse_out.features.get(c, oy, ox) as f64 - want).abs());
                }
            }
        }
    }
    verdict(
        3,
        "sparsity invariants",
        changed == 0 && non_binary == 0 && isolated_err == 0.0 && reduction <= 1e-5,
        &format!(
            "{changed} outputs changed by masked values, {non_binary} non-binary masks, isolated pixel error {isolated_err:e}, full-mask reduction error {reduction:.1e}"
        ),
    );
}

// ---------------------------------------------------------------- 4

#[test]
fn c04_architecture_accounting() {
    let (h, w) = (384, 1280);
    let count = |f: &dyn Fn(&mut ModelConfig)| {
        let mut cfg = ModelConfig::standard(2);
        f(&mut cfg);
        accounting(&cfg, h, w).unwrap()
    };
    let flat = count(&|_| {});
    let full = count(&|c| c.flat_affinity = false);
    let unguided = count(&|c| c.guidance = Guidance::None);
    let refined = count(&|c| c.refine = true);
    let param_gap = full.0 as f64 / flat.0 as f64 - 1.0;
    let flop_gap = full.1 as f64 / flat.1 as f64 - 1.0;
    let refine_gain = refined.0 as f64 / flat.0 as f64 - 1.0;
    let ok = param_gap > 0.5 && flop_gap > 0.5 && refine_gain < 0.02 && unguided.0 < flat.0 && flat.0 < full.0;
    verdict(
        4,
        "architecture accounting",
        ok,
        &format!(
            "params unguided {} < flat {} < full {}; full over flat +{:.0}% params +{:.0}% FLOPs; refinement +{:.2}% params",
            unguided.0,
            flat.0,
            full.0,
            100.0 * param_gap,
            100.0 * flop_gap,
            100.0 * refine_gain
        ),
    );
}

// ---------------------------------------------------------------- 5

#[test]
fn c05_overfit_single_sample() {
    let start = Instant::now();
    let params = SceneParams::new(64, 64, Task::OpticalFlow);
    let sample = Sparsification::uniform(0.05).apply(&synth_scene(5, &params).unwrap(), 6).unwrap();
    let mut model = build_model::<f32>(&ModelConfig::toy(2), 5).unwrap();
    let mut cfg = TrainConfig::new(Task::OpticalFlow, 2000);
    cfg.initial_lr = 3e-3;
    cfg.augment = false;
    let mut src = MemorySource {
        samples: vec![sample.clone()],
        resparsify: None,
        seed: 5,
    };
    train(&mut model, &mut src, &cfg, None).unwrap();
    let epe = evaluate(&model, std::slice::from_ref(&sample), EvalOptions::default()).unwrap().get("epe").unwrap();
    let nn = evaluate(&NearestFill, &[sample], EvalOptions::default()).unwrap().get("epe").unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        5,
        "overfit smoke test",
        epe < 0.5 && secs < 600.0,
        &format!("EPE {epe:.4} px after 2000 steps (threshold 0.5, nearest fill {nn:.3}), {secs:.0}s"),
    );
}

// ---------------------------------------------------------------- shared flow models

const FLOW_SIZE: usize = 64;
const FLOW_STEPS: usize = 1000;

fn flow_train_set(seed: u64) -> Vec<Sample> {
    let params = SceneParams::new(FLOW_SIZE, FLOW_SIZE, Task::OpticalFlow);
    (0..200).map(|i| synth_scene(stream_seed(seed, i), &params).unwrap()).collect()
}

fn flow_test_set(seed: u64, sp: &Sparsification) -> Vec<Sample> {
    let params = SceneParams::new(FLOW_SIZE, FLOW_SIZE, Task::OpticalFlow);
    (0..40)
        .map(|i| sp.apply(&synth_scene(stream_seed(seed + 1000, i), &params).unwrap(), stream_seed(seed + 2000, i)).unwrap())
        .collect()
}

fn noisy() -> Sparsification {
    Sparsification::uniform(0.05).with_noise(NoiseKind::Gaussian, 2.0)
}

fn train_flow(seed: u64, guidance: Guidance, sp: Sparsification) -> Model {
    let mut cfg = ModelConfig::toy(2);
    cfg.guidance = guidance;
    let mut model = build_model::<f32>(&cfg, seed).unwrap();
    let mut tc = TrainConfig::new(Task::OpticalFlow, FLOW_STEPS);
    tc.initial_lr = 1e-3;
    tc.seed = seed;
    let mut src = MemorySource {
        samples: flow_train_set(seed),
        resparsify: Some(sp),
        seed,
    };
    train(&mut model, &mut src, &tc, None).unwrap();
    model
}

/// Guided models trained on noisy 5% inputs, one per seed.
fn guided_noisy(seed: u64) -> &'static Model {
    static MODELS: [OnceLock<Model>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    MODELS[seed as usize].get_or_init(|| train_flow(seed, Guidance::Full, noisy()))
}

// ---------------------------------------------------------------- 6

#[test]
fn c06_generalization() {
    let start = Instant::now();
    let mut rows = Vec::new();
    for seed in 0..3 {
        let test = flow_test_set(seed, &noisy());
        let epe = |p: &dyn Predictor| evaluate(p, &test, EvalOptions::default()).unwrap().get("epe").unwrap();
        let guided = epe(guided_noisy(seed));
        let unguided = epe(&train_flow(seed, Guidance::None, noisy()));
        rows.push((guided, epe(&NearestFill), unguided));
    }
    let mean = |f: fn(&(f64, f64, f64)) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let (g, nn, ug) = (mean(|r| r.0), mean(|r| r.1), mean(|r| r.2));
    let (vs_nn, vs_ug) = (1.0 - g / nn, 1.0 - g / ug);
    let per_seed: Vec<String> = rows.iter().map(|r| format!("{:.3}/{:.3}/{:.3}", r.0, r.1, r.2)).collect();
    verdict(
        6,
        "generalization",
        vs_nn >= 0.10 && vs_ug >= 0.10,
        &format!(
            "mean EPE guided {g:.3}, nearest fill {nn:.3} ({:.1}% better), unguided {ug:.3} ({:.1}% better); per seed guided/nearest/unguided {}; {:.0}s",
            100.0 * vs_nn,
            100.0 * vs_ug,
            per_seed.join(" "),
            start.elapsed().as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------- 7

#[test]
fn c07_density_trend() {
    let start = Instant::now();
    let params = SceneParams::new(64, 64, Task::Depth);
    let densities = [1.0, 0.5, 0.2, 0.1, 0.05];
    let mut at_tenth = [Vec::new(), Vec::new()];
    let mut level_one_equal = true;
    for seed in 0..3 {
        let train_set: Vec<Sample> = (0..200).map(|i| synth_scene(stream_seed(seed, i), &params).unwrap()).collect();
        let test: Vec<Sample> = (0..20).map(|i| synth_scene(stream_seed(seed + 1000, i), &params).unwrap()).collect();
        for (slot, aware) in [true, false].into_iter().enumerate() {
            let mut cfg = ModelConfig::toy(1);
            cfg.sparse_aware = aware;
            let mut model = build_model::<f32>(&cfg, seed).unwrap();
            let mut tc = TrainConfig::new(Task::Depth, 600);
            tc.initial_lr = 1e-3;
            tc.seed = seed;
            let mut src = MemorySource {
                samples: train_set.clone(),
                resparsify: None,
                seed,
            };
            train(&mut model, &mut src, &tc, None).unwrap();
            let rows = sweep_density(&model, &test, &densities, "mae", seed, EvalOptions::default()).unwrap();
            level_one_equal &= rows[0].relative == 1.0;
            at_tenth[slot].push(rows[3].relative);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (aware, free) = (mean(&at_tenth[0]), mean(&at_tenth[1]));
    let ratio = (aware - 1.0) / (free - 1.0);
    verdict(
        7,
        "density trend",
        aware < free && level_one_equal,
        &format!(
            "relative MAE at 10% density: mask-aware {aware:.3} vs mask-free {free:.3} (per seed {:?} vs {:?}); increase ratio {ratio:.2}; {:.0}s",
            at_tenth[0].iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            at_tenth[1].iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            start.elapsed().as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------- 8

#[test]
fn c08_noise_trend() {
    let start = Instant::now();
    let clean = Sparsification::uniform(0.05);
    let test = flow_test_set(0, &clean);
    let noisy_model = guided_noisy(0);
    let clean_model = train_flow(0, Guidance::Full, clean);
    let kinds = [NoiseKind::Gaussian, NoiseKind::Laplacian];
    let levels = [0.0, 1.0, 2.0, 3.0, 5.0];
    let sweep = |m: &Model| sweep_noise(m, &test, &kinds, &levels, "koe", 0, EvalOptions::default()).unwrap();
    let (a, b) = (sweep(noisy_model), sweep(&clean_model));
    let pick = |rows: &[ssgp::evaluation::SweepRow], kind: &str, level: f64| {
        rows.iter().find(|r| r.kind == kind && r.level == level).unwrap().relative
    };
    let zero_exact = [&a, &b].iter().all(|rows| rows.iter().filter(|r| r.level == 0.0).all(|r| r.relative == 1.0));
    let (na, ca) = (pick(&a, "gaussian", 5.0), pick(&b, "gaussian", 5.0));
    let (nl, cl) = (pick(&a, "laplacian", 5.0), pick(&b, "laplacian", 5.0));
    verdict(
        8,
        "noise trend",
        na < ca && zero_exact,
        &format!(
            "relative KOE at sigma 5: noise-trained {na:.3} vs clean-trained {ca:.3} (laplacian {nl:.3} vs {cl:.3}); level 0 exactly 1: {zero_exact}; {:.0}s",
            start.elapsed().as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------- 9

fn flow_const(u: f32, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(Shape::new(2, h, w), move |c, _, _| if c == 0 { u } else { 0.0 })
}

#[test]
fn c09_metric_fixtures() {
    let mut failures = Vec::new();
    let ones = Tensor::ones(Shape::new(1, 1, 1));
    let koe = |p: f32, g: f32| metric_koe(&flow_const(p, 1, 1), &flow_const(g, 1, 1), &ones).unwrap();
    if koe(14.0, 10.0) != 100.0 {
        failures.push("4px/40% not an outlier");
    }
    if koe(104.0, 100.0) != 0.0 {
        failures.push("4px/4% counted as outlier");
    }
    if koe(13.0, 10.0) != 0.0 {
        failures.push("3px exactly counted as outlier");
    }

    // 8x8 flow field, gt u = 10 everywhere; four input outliers
    // (error 5 px, 50 %), three of them fixed in the prediction
    let gt = flow_const(10.0, 8, 8);
    let gt_mask = Tensor::ones(Shape::new(1, 8, 8));
    let mut sparse = MaskedFeature::new(Tensor::zeros(Shape::new(2, 8, 8)), Tensor::zeros(Shape::new(1, 8, 8))).unwrap();
    let mut pred = gt.clone();
    for (i, &(y, x)) in [(0, 0), (1, 5), (3, 3), (6, 2), (7, 7), (4, 6)].iter().enumerate() {
        sparse.mask.set(0, y, x, 1.0);
        sparse.features.set(0, y, x, if i < 4 { 15.0 } else { 10.5 });
    }
    pred.set(0, 6, 2, 16.0);
    let (orr, vacuous) = metric_orr(&sparse, &pred, &gt, &gt_mask).unwrap();
    if orr != 75.0 || vacuous {
        failures.push("ORR fixture is not 75%");
    }
    let clean = MaskedFeature::new(gt.clone(), gt_mask.clone()).unwrap();
    if metric_orr(&clean, &pred, &gt, &gt_mask).unwrap() != (100.0, true) {
        failures.push("ORR without input outliers not flagged vacuous");
    }

    // every report on random predictions satisfies RMSE >= MAE and matches the loop oracle
    let mut r = rng(109);
    let mut reports = 0;
    let mut oracle_err = 0f64;
    for task in [Task::OpticalFlow, Task::SceneFlow, Task::Depth] {
        let params = SceneParams::new(32, 36, task);
        let samples: Vec<Sample> = (0..4)
            .map(|i| Sparsification::uniform(0.1).apply(&synth_scene(i, &params).unwrap(), i + 50).unwrap())
            .collect();
        for _ in 0..5 {
            let scale = r.gen_range(0.1..20.0);
            let preds: Vec<Tensor> = samples
                .iter()
                .map(|s| {
                    let mut t = s.gt.clone();
                    t.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-scale..scale));
                    t
                })
                .collect();
            let rep = evaluate_predictions(&preds, &samples, EvalOptions { margin: 4 }, "fixture".into()).unwrap();
            reports += 1;
            if rep.check_invariants().is_err() || rep.get("rmse").unwrap() < rep.get("mae").unwrap() {
                failures.push("report violates RMSE >= MAE or range invariants");
            }
            let (epe, mae, rmse, koe) = pooled_oracle(&preds, &samples);
            oracle_err = oracle_err.max((rep.get("mae").unwrap() - mae).abs()).max((rep.get("rmse").unwrap() - rmse).abs());
            if task == Task::OpticalFlow {
                oracle_err = oracle_err.max((rep.get("epe").unwrap() - epe).abs()).max((rep.get("koe").unwrap() - koe).abs());
            }
        }
        let rep = evaluate(&NearestFill, &samples, EvalOptions { margin: 4 }).unwrap();
        reports += 1;
        if rep.get("rmse").unwrap() < rep.get("mae").unwrap() {
            failures.push("nearest-fill report has RMSE < MAE");
        }
    }
    if oracle_err > 1e-6 {
        failures.push("metrics disagree with the loop oracle");
    }
    verdict(
        9,
        "metric fixtures",
        failures.is_empty(),
        &format!("KOE boundary cases, ORR 3 of 4 = {orr}%, {reports} reports checked, oracle deviation {oracle_err:.1e}; failures {failures:?}"),
    );
}

/// Pixel-pooled metrics over several samples from per-sample oracle sums.
fn pooled_oracle(preds: &[Tensor], samples: &[Sample]) -> (f64, f64, f64, f64) {
    let (mut px, mut el, mut epe, mut abs, mut sq, mut out) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for (p, s) in preds.iter().zip(samples) {
        let n = s.gt_mask.data().iter().filter(|&&v| v != 0.0).count() as f64;
        let c = s.gt.shape().c as f64;
        let (e, m, r, k) = oracle::metrics(p, &s.gt, &s.gt_mask);
        px += n;
        el += n * c;
        epe += e * n;
        abs += m * n * c;
        sq += r * r * n * c;
        out += k * n / 100.0;
    }
    (epe / px, abs / el, (sq / el).sqrt(), 100.0 * out / px)
}

// ---------------------------------------------------------------- 10

#[test]
fn c10_refinement_properties() {
    let mut r = rng(110);
    let mut identity_err = 0f64;
    let mut expansion = 0f64;
    let mut weight_sum = 0f64;
    for _ in 0..100 {
        let (c, h, w) = (r.gen_range(1..=3), r.gen_range(1..=8), r.gen_range(1..=8));
        let k = if r.gen_bool(0.7) { 3 } else { 5 };
        let nk = k * k - 1;
        let x = random::<f64>(Shape::new(c, h, w), &mut r);

        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let zero = g.input(Tensor::zeros(Shape::new(c * nk, h, w)));
        let out = cspn_refine(&mut g, xv, zero, k, 5).unwrap();
        identity_err = identity_err.max(oracle::max_abs_diff(g.value(out), x.data()));

        let scale = 10f64.powf(r.gen_range(-3.0..3.0));
        let raw = Tensor::from_fn(Shape::new(c * nk, h, w), |_, _, _| r.gen_range(-scale..scale));
        let y = random::<f64>(Shape::new(c, h, w), &mut r);
        let mut g = Graph::new();
        let rv = g.input(raw.clone());
        let weights = g.stabilize(rv, k).unwrap();
        let (mut a, mut b) = (g.input(x.clone()), g.input(y));
        for _ in 0..5 {
            let before = diff_inf(g.value(a), g.value(b));
            let max_before = g.value(a).max_abs();
            a = g.cspn_step(a, weights, k).unwrap();
            b = g.cspn_step(b, weights, k).unwrap();
            expansion = expansion.max(diff_inf(g.value(a), g.value(b)) - before);
            expansion = expansion.max(g.value(a).max_abs() - max_before);
        }
        for ch in 0..c {
            let field = AffinityField::new(raw.slice_channels(ch * nk..(ch + 1) * nk).unwrap(), k).unwrap();
            let st = stability_transform(&field);
            for i in 0..h * w {
                let s: f64 = (0..nk).map(|j| st.off_center.data()[j * h * w + i].abs()).sum();
                weight_sum = weight_sum.max(s);
            }
        }
    }
    verdict(
        10,
        "refinement properties",
        identity_err == 0.0 && expansion <= 1e-12 && weight_sum <= 1.0 + 1e-6,
        &format!("zero-affinity deviation {identity_err:e}, largest sup-norm growth per iteration {expansion:.1e}, largest sum |a| {weight_sum:.9}"),
    );
}

fn diff_inf(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- 11

fn cli(args: &[&str]) -> i32 {
    ssgp::cli::run(std::iter::once("ssgp").chain(args.iter().copied()))
}

fn pipeline(root: &Path, replay: Option<&Path>) -> i32 {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let ckpt = p("train/final");
    let data = p("data");
    // (stage, paths, settings); a replay swaps the settings for the earlier snapshot
    let stages: [(&str, Vec<&str>, Vec<&str>); 5] = [
        ("data", vec!["synth"], vec!["--task", "flow", "--count", "8", "--size", "32x40", "--seed", "11"]),
        (
            "train",
            vec!["train", "--data", &data],
            vec!["--set", "preset=toy", "--set", "steps=30", "--set", "checkpoint_every=10", "--set", "resparsify=true", "--set", "noise=gaussian:1", "--seed", "11"],
        ),
        ("eval", vec!["eval", "--data", &data, "--ckpt", &ckpt], vec![]),
        ("noise", vec!["sweep-noise", "--data", &data, "--ckpt", &ckpt], vec!["--set", "noise_levels=0,2,5"]),
        ("density", vec!["sweep-density", "--data", &data, "--ckpt", &ckpt], vec!["--set", "densities=1,0.5,0.2"]),
    ];
    for (stage, paths, settings) in stages {
        let out = p(stage);
        let mut args: Vec<String> = paths.iter().map(|s| s.to_string()).collect();
        args.extend(["--out".to_string(), out, "--threads".into(), "1".into()]);
        match replay {
            Some(r) => args.extend(["--config".to_string(), r.join(stage).join(ssgp::cli::RESOLVED_CONFIG).to_string_lossy().into_owned()]),
            None => args.extend(settings.iter().map(|s| s.to_string())),
        }
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let code = cli(&refs);
        if code != 0 {
            return code;
        }
    }
    0
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn c11_cli_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline(a.path(), None);
    // the second run is driven by the snapshots the first one wrote
    let second = pipeline(b.path(), Some(a.path()));
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let differing: Vec<&String> = ta
        .iter()
        .filter(|(k, v)| tb.get(*k) != Some(v))
        .map(|(k, _)| k)
        .collect();
    let has = |suffix: &str| ta.keys().any(|k| k.ends_with(suffix));
    let complete = ["params.ckpt", "loss.csv", "metrics.csv", "sweep_noise.csv", "sweep_density.csv"].iter().all(|s| has(s));
    verdict(
        11,
        "CLI determinism",
        first == 0 && second == 0 && complete && differing.is_empty() && ta.len() == tb.len(),
        &format!("exit codes {first}/{second}, {} files compared, differing {differing:?}", ta.len()),
    );
}
