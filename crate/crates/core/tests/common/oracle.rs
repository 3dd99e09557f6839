//! Double-precision loop implementations written directly from the
//! definitions, independent of the library's im2col and GEMM paths.

use ssgp::{Scalar, Shape, Tensor};

fn at<T: Scalar>(t: &Tensor<T>, c: usize, y: usize, x: usize) -> f64 {
    t.get(c, y, x).to_f64_lossy()
}

fn inside(y: isize, x: isize, h: usize, w: usize) -> Option<(usize, usize)> {
    (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w).then_some((y as usize, x as usize))
}

/// Normalized sparse convolution with weights `[c_out, c_in, k, k]`.
/// Returns features and mask.
pub fn sparse_conv<T: Scalar>(x: &Tensor<T>, m: &Tensor<T>, w: &[T], b: &[T], c_out: usize, k: usize, stride: usize) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let (ho, wo) = (s.h.div_ceil(stride), s.w.div_ceil(stride));
    let r = (k / 2) as isize;
    let mut out = vec![0.0; c_out * ho * wo];
    let mut mask = vec![0.0; ho * wo];
    for oy in 0..ho {
        for ox in 0..wo {
            let mut count = 0.0;
            for ky in 0..k {
                for kx in 0..k {
                    let q = inside((oy * stride + ky) as isize - r, (ox * stride + kx) as isize - r, s.h, s.w);
                    if let Some((iy, ix)) = q {
                        count += at(m, 0, iy, ix);
                    }
                }
            }
            if count == 0.0 {
                continue;
            }
            mask[oy * wo + ox] = 1.0;
            for o in 0..c_out {
                let mut num = 0.0;
                for c in 0..s.c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let q = inside((oy * stride + ky) as isize - r, (ox * stride + kx) as isize - r, s.h, s.w);
                            if let Some((iy, ix)) = q {
                                let wt = w[((o * s.c + c) * k + ky) * k + kx].to_f64_lossy();
                                num += wt * at(x, c, iy, ix) * at(m, 0, iy, ix);
                            }
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = num / count + b[o].to_f64_lossy();
            }
        }
    }
    (out, mask)
}

/// 3×3 stride-2 average over valid entries.
pub fn avg_pool<T: Scalar>(x: &Tensor<T>, m: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let (ho, wo) = (s.h.div_ceil(2), s.w.div_ceil(2));
    let mut out = vec![0.0; s.c * ho * wo];
    let mut mask = vec![0.0; ho * wo];
    for oy in 0..ho {
        for ox in 0..wo {
            let taps: Vec<(usize, usize)> = (0..3)
                .flat_map(|dy| (0..3).map(move |dx| (dy, dx)))
                .filter_map(|(dy, dx)| inside((2 * oy + dy) as isize - 1, (2 * ox + dx) as isize - 1, s.h, s.w))
                .filter(|&(y, xx)| at(m, 0, y, xx) != 0.0)
                .collect();
            if taps.is_empty() {
                continue;
            }
            mask[oy * wo + ox] = 1.0;
            for c in 0..s.c {
                let sum: f64 = taps.iter().map(|&(y, xx)| at(x, c, y, xx)).sum();
                out[(c * ho + oy) * wo + ox] = sum / taps.len() as f64;
            }
        }
    }
    (out, mask)
}

/// Stage-1 propagation. `aff` holds `K²−1` off-centre weights per pixel
/// (flat) or per channel and pixel.
pub fn propagate<T: Scalar>(x: &Tensor<T>, m: &Tensor<T>, aff: &Tensor<T>, k: usize, per_channel: bool) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let r = (k / 2) as isize;
    let nk = k * k - 1;
    let centre = k * k / 2;
    let mut out = vec![0.0; s.len()];
    let mut mask = vec![0.0; s.plane()];
    for y in 0..s.h {
        for xx in 0..s.w {
            let mut count = 0.0;
            for j in 0..k * k {
                let q = inside(y as isize + (j / k) as isize - r, xx as isize + (j % k) as isize - r, s.h, s.w);
                if let Some((qy, qx)) = q {
                    count += at(m, 0, qy, qx);
                }
            }
            if count == 0.0 {
                continue;
            }
            mask[y * s.w + xx] = 1.0;
            for c in 0..s.c {
                let base = if per_channel { c * nk } else { 0 };
                let mut num = 0.0;
                for j in 0..k * k {
                    let q = inside(y as isize + (j / k) as isize - r, xx as isize + (j % k) as isize - r, s.h, s.w);
                    let Some((qy, qx)) = q else { continue };
                    let wt = match j.cmp(&centre) {
                        std::cmp::Ordering::Equal => 1.0,
                        std::cmp::Ordering::Less => at(aff, base + j, y, xx),
                        std::cmp::Ordering::Greater => at(aff, base + j - 1, y, xx),
                    };
                    num += wt * at(x, c, qy, qx) * at(m, 0, qy, qx);
                }
                out[(c * s.h + y) * s.w + xx] = num / count;
            }
        }
    }
    (out, mask)
}

pub fn max_abs_diff<T: Scalar>(a: &Tensor<T>, b: &[f64]) -> f64 {
    a.data()
        .iter()
        .zip(b)
        .map(|(x, y)| (x.to_f64_lossy() - y).abs())
        .fold(0.0, f64::max)
}

fn pixel_norm(t: &Tensor, y: usize, x: usize) -> f64 {
    (0..t.shape().c).map(|c| (t.get(c, y, x) as f64).powi(2)).sum::<f64>().sqrt()
}

fn pixel_err(a: &Tensor, b: &Tensor, y: usize, x: usize) -> f64 {
    (0..a.shape().c)
        .map(|c| (a.get(c, y, x) as f64 - b.get(c, y, x) as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn valid(mask: &Tensor) -> Vec<(usize, usize)> {
    let s = mask.shape();
    (0..s.h)
        .flat_map(|y| (0..s.w).map(move |x| (y, x)))
        .filter(|&(y, x)| mask.get(0, y, x) != 0.0)
        .collect()
}

/// `(epe, mae, rmse, koe%)` over the valid pixels.
pub fn metrics(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> (f64, f64, f64, f64) {
    let px = valid(mask);
    let n = px.len() as f64;
    let c = pred.shape().c;
    let epe = px.iter().map(|&(y, x)| pixel_err(pred, gt, y, x)).sum::<f64>() / n;
    let (mut abs, mut sq) = (0.0, 0.0);
    for &(y, x) in &px {
        for ch in 0..c {
            let d = pred.get(ch, y, x) as f64 - gt.get(ch, y, x) as f64;
            abs += d.abs();
            sq += d * d;
        }
    }
    let outliers = px
        .iter()
        .filter(|&&(y, x)| {
            let e = pixel_err(pred, gt, y, x);
            e > 3.0 && e > 0.05 * pixel_norm(gt, y, x)
        })
        .count() as f64;
    (epe, abs / (n * c as f64), (sq / (n * c as f64)).sqrt(), 100.0 * outliers / n)
}

/// Percentage of input outliers corrected by the prediction.
pub fn orr(sparse: &Tensor, sparse_mask: &Tensor, pred: &Tensor, gt: &Tensor, gt_mask: &Tensor) -> Option<f64> {
    let outlier = |t: &Tensor, y, x| {
        let e = pixel_err(t, gt, y, x);
        e > 3.0 && e > 0.05 * pixel_norm(gt, y, x)
    };
    let input_out: Vec<_> = valid(sparse_mask)
        .into_iter()
        .filter(|&(y, x)| gt_mask.get(0, y, x) != 0.0 && outlier(sparse, y, x))
        .collect();
    if input_out.is_empty() {
        return None;
    }
    let fixed = input_out.iter().filter(|&&(y, x)| !outlier(pred, y, x)).count();
    Some(100.0 * fixed as f64 / input_out.len() as f64)
}

pub fn shape_of(c: usize, h: usize, w: usize) -> Shape {
    Shape::new(c, h, w)
}
