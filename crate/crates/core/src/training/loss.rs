//! Masked regression losses over `[C, H, W]` predictions.

use crate::error::{Error, Result};
use crate::graph::EPE_SMOOTHING;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

fn check<T: Scalar>(op: &'static str, pred: &Tensor<T>, gt: &Tensor<T>, mask: &Tensor<T>) -> Result<usize> {
    let s = pred.shape();
    if gt.shape() != s {
        return Err(Error::shape(op, format!("prediction {s} vs ground truth {}", gt.shape())));
    }
    if mask.shape() != Shape::new(1, s.h, s.w) {
        return Err(Error::shape(op, format!("mask {} for {s}", mask.shape())));
    }
    let n = mask.data().iter().filter(|&&m| m != T::zero()).count();
    if n == 0 {
        return Err(Error::EmptyMask(op));
    }
    Ok(n)
}

/// Mean Euclidean norm of the residual vector over valid pixels, and the
/// number of valid pixels.
pub fn epe_value<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, mask: &Tensor<T>) -> Result<(f64, usize)> {
    let n = check("loss_epe", pred, gt, mask)?;
    let s = pred.shape();
    let p = s.plane();
    let mut total = 0.0f64;
    for i in 0..p {
        if mask.data()[i] == T::zero() {
            continue;
        }
        let mut sq = 0.0f64;
        for c in 0..s.c {
            let d = pred.data()[c * p + i].to_f64_lossy() - gt.data()[c * p + i].to_f64_lossy();
            sq += d * d;
        }
        total += (sq + EPE_SMOOTHING).sqrt();
    }
    Ok((total / n as f64, n))
}

/// Mean squared residual over valid pixels (all channels averaged).
pub fn mse_value<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, mask: &Tensor<T>) -> Result<(f64, usize)> {
    let n = check("loss_mse", pred, gt, mask)?;
    let s = pred.shape();
    let p = s.plane();
    let mut total = 0.0f64;
    for c in 0..s.c {
        for i in 0..p {
            if mask.data()[i] != T::zero() {
                let d = pred.data()[c * p + i].to_f64_lossy() - gt.data()[c * p + i].to_f64_lossy();
                total += d * d;
            }
        }
    }
    Ok((total / (n * s.c) as f64, n))
}

pub(crate) fn epe_grad<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, mask: &Tensor<T>, count: usize, g0: T) -> Vec<T> {
    let s = pred.shape();
    let p = s.plane();
    let mut d = vec![T::zero(); s.len()];
    let scale = g0.to_f64_lossy() / count as f64;
    for i in 0..p {
        if mask.data()[i] == T::zero() {
            continue;
        }
        let mut sq = 0.0f64;
        for c in 0..s.c {
            let r = pred.data()[c * p + i].to_f64_lossy() - gt.data()[c * p + i].to_f64_lossy();
            sq += r * r;
        }
        let inv = scale / (sq + EPE_SMOOTHING).sqrt();
        for c in 0..s.c {
            let r = pred.data()[c * p + i].to_f64_lossy() - gt.data()[c * p + i].to_f64_lossy();
            d[c * p + i] = T::from_f64_lossy(r * inv);
        }
    }
    d
}

pub(crate) fn mse_grad<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, mask: &Tensor<T>, count: usize, g0: T) -> Vec<T> {
    let s = pred.shape();
    let p = s.plane();
    let mut d = vec![T::zero(); s.len()];
    let scale = 2.0 * g0.to_f64_lossy() / (count * s.c) as f64;
    for c in 0..s.c {
        for i in 0..p {
            if mask.data()[i] != T::zero() {
                let r = pred.data()[c * p + i].to_f64_lossy() - gt.data()[c * p + i].to_f64_lossy();
                d[c * p + i] = T::from_f64_lossy(r * scale);
            }
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_four_five() {
        let s = Shape::new(2, 3, 3);
        let gt = Tensor::<f64>::from_fn(s, |c, y, x| (c + y * x) as f64);
        let pred = Tensor::from_fn(s, |c, y, x| gt.get(c, y, x) + if c == 0 { 3.0 } else { 4.0 });
        let m = Tensor::ones(Shape::new(1, 3, 3));
        let (v, n) = epe_value(&pred, &gt, &m).unwrap();
        assert_eq!(n, 9);
        assert!((v - 5.0).abs() < 1e-9);
        assert!(epe_value(&gt, &gt, &m).unwrap().0 < 1e-4);
    }

    #[test]
    fn mse_constant_residual() {
        let s = Shape::new(1, 2, 5);
        let gt = Tensor::<f32>::from_fn(s, |_, y, x| (y * 5 + x) as f32);
        let pred = gt.map(|v| v + 2.0);
        let m = Tensor::ones(Shape::new(1, 2, 5));
        assert_eq!(mse_value(&pred, &gt, &m).unwrap().0, 4.0);
        assert_eq!(mse_value(&gt, &gt, &m).unwrap().0, 0.0);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let t = Tensor::<f32>::zeros(Shape::new(2, 2, 2));
        let m = Tensor::zeros(Shape::new(1, 2, 2));
        assert!(matches!(epe_value(&t, &t, &m), Err(Error::EmptyMask(_))));
        assert!(mse_value(&t, &t, &m).is_err());
    }
}
