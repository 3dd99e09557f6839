//! Fast built-in verification suites: loop oracles, sparsity invariants,
//! refinement bounds, finite-difference gradients and metric fixtures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::evaluation::{metric_koe, metric_orr};
use crate::gradcheck::{grad_check, GradCheckOptions};
use crate::graph::Graph;
use crate::layers::{Activation, Conv2d};
use crate::param::{InitMode, ParamStore};
use crate::propagation::{propagate_flat, stability_transform, AffinityField, SsgpModule};
use crate::sparse::MaskedFeature;
use crate::tensor::{Shape, Tensor};

/// Outcome of one suite.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Suite = fn(&mut ChaCha8Rng) -> Result<String, String>;

/// Run every suite with a fixed seed.
pub fn run_all() -> Vec<SuiteResult> {
    let suites: [(&'static str, Suite); 6] = [
        ("sparse-conv-oracle", sparse_conv_oracle),
        ("propagation-oracle", propagation_oracle),
        ("sparsity-invariance", sparsity_invariance),
        ("refinement-bounds", refinement_bounds),
        ("gradients", gradients),
        ("metric-fixtures", metric_fixtures),
    ];
    suites
        .iter()
        .map(|(name, f)| {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f);
            let (passed, detail) = match f(&mut rng) {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            SuiteResult { name, passed, detail }
        })
        .collect()
}

fn fixture(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> MaskedFeature<f64> {
    let f = Tensor::from_fn(Shape::new(c, h, w), |_, _, _| rng.gen_range(-1.0..1.0));
    let m = Tensor::from_fn(Shape::new(1, h, w), |_, _, _| if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
    MaskedFeature::new(f, m).expect("matching shapes")
}

fn sparse_conv_oracle(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let mut worst = 0f64;
    for _ in 0..200 {
        let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(1..8), rng.gen_range(1..8));
        let k = if rng.gen_bool(0.5) { 3 } else { 1 };
        let stride = rng.gen_range(1..3);
        let input = fixture(rng, c, h, w);
        let mut store = ParamStore::<f64>::new();
        let layer = Conv2d::new(&mut store, rng, "c", c, 2, k, stride, InitMode::ReluScaled).map_err(|e| e.to_string())?;
        let b = store.get(layer.bias).value.clone();
        let wt = store.get(layer.weight).value.clone();
        let mut g = Graph::new();
        let x = g.masked_input(&input);
        let y = g.sparse_conv2d(&store, &layer, &x, Activation::Linear).map_err(|e| e.to_string())?;
        let out = g.masked_value(&y);
        let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
        for o in 0..2 {
            for oy in 0..ho {
                for ox in 0..wo {
                    let (mut num, mut cnt) = (0.0, 0.0);
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - (k / 2) as isize;
                            let ix = (ox * stride + kx) as isize - (k / 2) as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let (iy, ix) = (iy as usize, ix as usize);
                            let m = input.mask.get(0, iy, ix);
                            cnt += m;
                            for ci in 0..c {
                                num += wt[((o * c + ci) * k + ky) * k + kx] * input.features.get(ci, iy, ix) * m;
                            }
                        }
                    }
                    let want = if cnt > 0.0 { num / cnt + b[o] } else { 0.0 };
                    worst = worst.max((out.features.get(o, oy, ox) - want).abs());
                    if (out.mask.get(0, oy, ox) > 0.0) != (cnt > 0.0) {
                        return Err(format!("mask mismatch at ({oy},{ox})"));
                    }
                }
            }
        }
    }
    check_abs(worst, 1e-9)
}

fn propagation_oracle(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let mut worst = 0f64;
    for _ in 0..200 {
        let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(1..8), rng.gen_range(1..8));
        let input = fixture(rng, c, h, w);
        let aff = AffinityField::new(Tensor::from_fn(Shape::new(8, h, w), |_, _, _| rng.gen_range(-1.0..1.0)), 3)
            .map_err(|e| e.to_string())?;
        let out = propagate_flat(&input, &aff).map_err(|e| e.to_string())?;
        for y in 0..h {
            for x in 0..w {
                let kern = aff.kernel_at(y, x);
                for ch in 0..c {
                    let (mut num, mut cnt) = (0.0, 0.0);
                    for j in 0..9 {
                        let (qy, qx) = (y as isize + j as isize / 3 - 1, x as isize + j as isize % 3 - 1);
                        if qy < 0 || qx < 0 || qy >= h as isize || qx >= w as isize {
                            continue;
                        }
                        let m = input.mask.get(0, qy as usize, qx as usize);
                        cnt += m;
                        num += m * kern[j] * input.features.get(ch, qy as usize, qx as usize);
                    }
                    let want = if cnt > 0.0 { num / cnt } else { 0.0 };
                    worst = worst.max((out.features.get(ch, y, x) - want).abs());
                }
            }
        }
    }
    check_abs(worst, 1e-9)
}

fn check_abs(worst: f64, tol: f64) -> Result<String, String> {
    if worst <= tol {
        Ok(format!("max abs deviation {worst:.2e}"))
    } else {
        Err(format!("max abs deviation {worst:.2e} above {tol:.0e}"))
    }
}

fn sparsity_invariance(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let mut store = ParamStore::<f64>::new();
    let layer = Conv2d::new(&mut store, rng, "c", 2, 3, 3, 1, InitMode::ReluScaled).map_err(|e| e.to_string())?;
    for _ in 0..50 {
        let a = fixture(rng, 2, 7, 6);
        let mut b = a.clone();
        for c in 0..2 {
            for i in 0..42 {
                if a.mask.data()[i] == 0.0 {
                    b.features.channel_mut(c)[i] = rng.gen_range(-100.0..100.0);
                }
            }
        }
        let run = |m: &MaskedFeature<f64>| {
            let mut g = Graph::new();
            let x = g.masked_input(m);
            let y = g.sparse_conv2d(&store, &layer, &x, Activation::Relu).expect("valid layer");
            let p = g.sparse_avg_pool(&y).expect("pool");
            g.masked_value(&p)
        };
        if run(&a) != run(&b) {
            return Err("values under mask 0 changed the output".into());
        }
    }
    Ok("50 fixtures bit-identical".into())
}

fn refinement_bounds(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let mut worst = 0f64;
    for _ in 0..100 {
        let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
        let raw = AffinityField::new(Tensor::from_fn(Shape::new(8, 4, 5), |_, _, _| rng.gen_range(-scale..scale)), 3)
            .map_err(|e| e.to_string())?;
        let st = stability_transform(&raw);
        for i in 0..20 {
            let s: f64 = (0..8).map(|j| st.off_center.data()[j * 20 + i].abs()).sum();
            worst = worst.max(s);
        }
    }
    if worst > 1.0 + 1e-6 {
        return Err(format!("off-centre weight sum {worst} exceeds 1"));
    }
    Ok(format!("largest off-centre sum {worst:.6}"))
}

fn gradients(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let opts = GradCheckOptions::default();
    let mut store = ParamStore::<f64>::new();
    let module = SsgpModule::new(&mut store, rng, "s", 2, 3, 3, false).map_err(|e| e.to_string())?;
    for p in store.iter_mut() {
        p.value.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
    }
    let x = Tensor::from_fn(Shape::new(2, 5, 5), |_, _, _| rng.gen_range(-1.0..1.0));
    let a = Tensor::from_fn(Shape::new(8, 5, 5), |_, _, _| rng.gen_range(-1.0..1.0));
    let mask = Tensor::from_fn(Shape::new(1, 5, 5), |_, y, x| if (y + 2 * x) % 3 == 0 { 1.0 } else { 0.0 });
    let rep = grad_check(
        |g, p, v| {
            let input = crate::sparse::MaskedVar {
                features: v[0],
                mask: mask.clone(),
            };
            let out = module.forward(g, p, &input, v[1])?;
            Ok(out.features)
        },
        &[x, a],
        &store,
        &opts,
    )
    .map_err(|e| e.to_string())?;
    if !rep.passes(1e-4) {
        return Err(format!("propagation module relative error {:.2e}", rep.max_rel_error));
    }
    Ok(format!("{} coordinates, max relative error {:.2e}", rep.checked, rep.max_rel_error))
}

fn metric_fixtures(_: &mut ChaCha8Rng) -> Result<String, String> {
    let ones = Tensor::ones(Shape::new(1, 2, 2));
    let flow = |u: f32| Tensor::from_fn(Shape::new(2, 2, 2), move |c, _, _| if c == 0 { u } else { 0.0 });
    let e = |r: crate::Result<f64>| r.map_err(|e| e.to_string());
    if e(metric_koe(&flow(14.0), &flow(10.0), &ones))? != 100.0 {
        return Err("4 px / 40 % must be an outlier".into());
    }
    if e(metric_koe(&flow(104.0), &flow(100.0), &ones))? != 0.0 {
        return Err("4 px / 4 % must be an inlier".into());
    }
    let sparse = MaskedFeature::new(flow(14.0), ones.clone()).map_err(|e| e.to_string())?;
    let (orr, vacuous) = metric_orr(&sparse, &flow(10.0), &flow(10.0), &ones).map_err(|e| e.to_string())?;
    if orr != 100.0 || vacuous {
        return Err(format!("ORR {orr} for a fully corrected input"));
    }
    Ok("outlier rule and ORR fixtures exact".into())
}
