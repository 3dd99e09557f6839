//! Finite-difference cases shared by the gradient tests and the
//! acceptance suite. Each returns `(label, report, tolerance)` rows.

use ssgp::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use ssgp::layers::{Activation, Conv2d, ConvTranspose2d};
use ssgp::network::{build_model, ModelConfig};
use ssgp::param::{InitMode, ParamStore};
use ssgp::propagation::{cspn_refine, RefinementHead, SsgpModule};
use ssgp::sparse::MaskedVar;
use ssgp::{Shape, Tensor};

use super::{away_from_zero, jitter, random, random_mask, rng};

pub const OP_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

pub type Case = (String, GradCheckReport, f64);

fn opts() -> GradCheckOptions {
    GradCheckOptions::default()
}

pub fn conv2d() -> Vec<Case> {
    let mut r = rng(1);
    [1, 2]
        .into_iter()
        .map(|stride| {
            let mut store = ParamStore::<f64>::new();
            let conv = Conv2d::new(&mut store, &mut r, "c", 2, 3, 3, stride, InitMode::ReluScaled).unwrap();
            jitter(&mut store, 0.3, &mut r);
            let x = random(Shape::new(2, 5, 5), &mut r);
            let rep = grad_check(|g, p, v| g.conv2d(p, &conv, v[0], Activation::Linear), &[x], &store, &opts()).unwrap();
            (format!("conv2d stride {stride}"), rep, OP_TOL)
        })
        .collect()
}

pub fn conv_transpose() -> Vec<Case> {
    let mut r = rng(2);
    let mut store = ParamStore::<f64>::new();
    let up = ConvTranspose2d::new(&mut store, &mut r, "t", 3, 2, InitMode::ReluScaled).unwrap();
    jitter(&mut store, 0.3, &mut r);
    let x = random(Shape::new(3, 3, 4), &mut r);
    let rep = grad_check(|g, p, v| g.conv_transpose2d(p, &up, v[0], Activation::Linear), &[x], &store, &opts()).unwrap();
    vec![("conv transpose".into(), rep, OP_TOL)]
}

pub fn relu() -> Vec<Case> {
    let mut r = rng(3);
    let x = away_from_zero(Shape::new(2, 4, 4), 0.1, &mut r);
    let rep = grad_check(|g, _, v| Ok(g.relu(v[0])), &[x], &ParamStore::new(), &opts()).unwrap();
    vec![("relu".into(), rep, 1e-6)]
}

pub fn concat_add_crop() -> Vec<Case> {
    let mut r = rng(4);
    let a = random(Shape::new(2, 4, 5), &mut r);
    let b = random(Shape::new(3, 4, 5), &mut r);
    let c = random(Shape::new(5, 4, 5), &mut r);
    let rep = grad_check(
        |g, _, v| {
            let cat = g.concat(v[0], v[1])?;
            let s = g.add(cat, v[2])?;
            g.crop(s, 3, 4)
        },
        &[a, b, c],
        &ParamStore::new(),
        &opts(),
    )
    .unwrap();
    vec![("concat/add/crop".into(), rep, OP_TOL)]
}

pub fn sparse_conv_pool_upsample() -> Vec<Case> {
    let mut r = rng(5);
    [(3, 1), (3, 2), (1, 1)]
        .into_iter()
        .map(|(k, stride)| {
            let mut store = ParamStore::<f64>::new();
            let conv = Conv2d::new(&mut store, &mut r, "s", 2, 3, k, stride, InitMode::ReluScaled).unwrap();
            jitter(&mut store, 0.3, &mut r);
            let x = random(Shape::new(2, 6, 5), &mut r);
            let mask = random_mask(6, 5, 0.4, &mut r);
            let rep = grad_check(
                |g, p, v| {
                    let m = MaskedVar {
                        features: v[0],
                        mask: mask.clone(),
                    };
                    let y = g.sparse_conv2d(p, &conv, &m, Activation::Linear)?;
                    let pooled = g.sparse_avg_pool(&y)?;
                    let up = g.nn_upsample(&pooled, y.mask.shape().h, y.mask.shape().w)?;
                    Ok(up.features)
                },
                &[x],
                &store,
                &opts(),
            )
            .unwrap();
            (format!("sparse conv k{k} s{stride} + pool + upsample"), rep, OP_TOL)
        })
        .collect()
}

pub fn skip_merge() -> Vec<Case> {
    let mut r = rng(6);
    let mut store = ParamStore::<f64>::new();
    let merge = Conv2d::new(&mut store, &mut r, "m", 2, 2, 3, 1, InitMode::ReluScaled).unwrap();
    jitter(&mut store, 0.3, &mut r);
    let a = random(Shape::new(2, 5, 5), &mut r);
    let b = random(Shape::new(2, 5, 5), &mut r);
    let ma = random_mask(5, 5, 0.3, &mut r);
    let mb = random_mask(5, 5, 0.3, &mut r);
    let rep = grad_check(
        |g, p, v| {
            let da = MaskedVar {
                features: v[0],
                mask: ma.clone(),
            };
            let eb = MaskedVar {
                features: v[1],
                mask: mb.clone(),
            };
            Ok(g.sparse_skip_merge(p, &merge, &da, &eb, Activation::Linear)?.features)
        },
        &[a, b],
        &store,
        &opts(),
    )
    .unwrap();
    vec![("skip merge".into(), rep, OP_TOL)]
}

pub fn propagation() -> Vec<Case> {
    let mut r = rng(7);
    let mut out = Vec::new();
    for per_channel in [false, true] {
        let mut store = ParamStore::<f64>::new();
        let module = SsgpModule::new(&mut store, &mut r, "p", 3, 2, 3, per_channel).unwrap();
        jitter(&mut store, 0.3, &mut r);
        let x = random(Shape::new(3, 5, 6), &mut r);
        let aff = random(Shape::new(if per_channel { 24 } else { 8 }, 5, 6), &mut r);
        let mask = random_mask(5, 6, 0.5, &mut r);
        let rep = grad_check(
            |g, _, v| {
                let m = MaskedVar {
                    features: v[0],
                    mask: mask.clone(),
                };
                Ok(g.propagate(&m, v[1], 3, per_channel)?.features)
            },
            &[x.clone(), aff.clone()],
            &ParamStore::new(),
            &opts(),
        )
        .unwrap();
        out.push((format!("propagate per_channel={per_channel}"), rep, OP_TOL));
        let rep = grad_check(
            |g, p, v| {
                let m = MaskedVar {
                    features: v[0],
                    mask: mask.clone(),
                };
                Ok(module.forward(g, p, &m, v[1])?.features)
            },
            &[x, aff],
            &store,
            &opts(),
        )
        .unwrap();
        out.push((format!("propagation module per_channel={per_channel}"), rep, OP_TOL));
    }
    out
}

pub fn refinement() -> Vec<Case> {
    let mut r = rng(8);
    let dense = random(Shape::new(2, 5, 5), &mut r);
    let raw = away_from_zero(Shape::new(16, 5, 5), 0.05, &mut r);
    let rep = grad_check(|g, _, v| cspn_refine(g, v[0], v[1], 3, 4), &[dense.clone(), raw], &ParamStore::new(), &opts()).unwrap();
    let mut out = vec![("refinement iterations".to_string(), rep, OP_TOL)];
    let mut store = ParamStore::<f64>::new();
    let head = RefinementHead::new(&mut store, &mut r, "r", 3, 2, 3, 10).unwrap();
    let feats = random(Shape::new(3, 5, 5), &mut r);
    let rep = grad_check(|g, p, v| head.forward(g, p, v[0], v[1]), &[dense, feats], &store, &opts()).unwrap();
    out.push(("refinement head".into(), rep, OP_TOL));
    out
}

pub fn losses() -> Vec<Case> {
    let mut r = rng(9);
    let gt = random(Shape::new(2, 4, 4), &mut r);
    let off = away_from_zero(Shape::new(2, 4, 4), 0.05, &mut r);
    let mut pred = gt.clone();
    pred.data_mut().iter_mut().zip(off.data()).for_each(|(p, o)| *p += o);
    let mask = random_mask(4, 4, 0.7, &mut r);
    let epe = grad_check(|g, _, v| g.loss_epe(v[0], &gt, &mask), &[pred.clone()], &ParamStore::new(), &opts()).unwrap();
    let mse = grad_check(|g, _, v| g.loss_mse(v[0], &gt, &mask), &[pred], &ParamStore::new(), &opts()).unwrap();
    vec![("epe loss".into(), epe, 1e-5), ("mse loss".into(), mse, 1e-5)]
}

pub fn all_ops() -> Vec<Case> {
    [conv2d, conv_transpose, relu, concat_add_crop, sparse_conv_pool_upsample, skip_merge, propagation, refinement, losses]
        .iter()
        .flat_map(|f| f())
        .collect()
}

/// Loss of a small fully guided model with refinement, differentiated
/// with respect to the image, the sparse values and every parameter.
pub fn end_to_end(size: usize) -> Case {
    let mut r = rng(10);
    let mut cfg = ModelConfig::toy(2);
    cfg.refine = true;
    cfg.refine_iterations = 3;
    let mut model = build_model::<f64>(&cfg, 10).unwrap();
    jitter(&mut model.params, 0.05, &mut r);
    let image = random(Shape::new(3, size, size), &mut r);
    let mask = random_mask(size, size, 0.2, &mut r);
    let sparse = Tensor::from_fn(Shape::new(2, size, size), |c, y, x| {
        if mask.get(0, y, x) == 0.0 {
            0.0
        } else {
            (c as f64 + 1.0) * ((y + x) as f64 * 0.3).sin()
        }
    });
    let gt = random(Shape::new(2, size, size), &mut r);
    let gt_mask = Tensor::ones(Shape::new(1, size, size));
    let arch = &model.arch;
    let rep = grad_check(
        |g, p, v| {
            let input = MaskedVar {
                features: v[1],
                mask: mask.clone(),
            };
            let out = arch.forward(g, p, v[0], &input)?;
            g.loss_epe(out.dense, &gt, &gt_mask)
        },
        &[image, sparse],
        &model.params,
        &opts(),
    )
    .unwrap();
    (format!("toy model {size}x{size} end to end"), rep, END_TO_END_TOL)
}

pub fn assert_cases(cases: &[Case]) {
    for (name, rep, tol) in cases {
        assert!(rep.passes(*tol), "{name}: {rep:?} exceeds {tol:e}");
    }
}
