#![allow(dead_code)]

pub mod grads;
pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssgp::param::ParamStore;
use ssgp::{MaskedFeature, Scalar, Shape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random<T: Scalar>(shape: Shape, r: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_, _, _| T::from_f64_lossy(r.gen_range(-1.0..1.0)))
}

/// Values bounded away from zero so ReLU kinks are never crossed.
pub fn away_from_zero(shape: Shape, margin: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _| {
        let v: f64 = r.gen_range(margin..1.0);
        if r.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Random binary mask with the centre pixel forced valid.
pub fn random_mask<T: Scalar>(h: usize, w: usize, density: f64, r: &mut ChaCha8Rng) -> Tensor<T> {
    let mut m = Tensor::from_fn(Shape::new(1, h, w), |_, _, _| if r.gen_bool(density) { T::one() } else { T::zero() });
    m.set(0, h / 2, w / 2, T::one());
    m
}

/// Random masked input with zeros under the invalid pixels.
pub fn random_sparse<T: Scalar>(c: usize, h: usize, w: usize, density: f64, r: &mut ChaCha8Rng) -> MaskedFeature<T> {
    let mask: Tensor<T> = random_mask(h, w, density, r);
    let f = Tensor::from_fn(Shape::new(c, h, w), |_, y, x| {
        let v = T::from_f64_lossy(r.gen_range(-1.0..1.0));
        if mask.get(0, y, x) == T::zero() {
            T::zero()
        } else {
            v
        }
    });
    MaskedFeature::new(f, mask).unwrap()
}

/// Randomize every parameter, including zero-initialized ones.
pub fn jitter<T: Scalar>(store: &mut ParamStore<T>, scale: f64, r: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        for v in p.value.iter_mut() {
            *v += T::from_f64_lossy(r.gen_range(-scale..scale));
        }
    }
}

/// Print one acceptance line and fail the test when `ok` is false.
pub fn verdict(criterion: u32, name: &str, ok: bool, detail: &str) {
    println!("criterion {criterion:>2} {} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {criterion} ({name}) failed: {detail}");
}
