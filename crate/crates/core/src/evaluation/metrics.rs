//! Masked error metrics in original target units.

use crate::error::{Error, Result};
use crate::sparse::MaskedFeature;
use crate::tensor::{Shape, Tensor};

/// Absolute end-point error threshold of the outlier rule, px.
pub const KOE_ABS: f64 = 3.0;
/// Relative threshold of the outlier rule.
pub const KOE_REL: f64 = 0.05;

fn check(op: &'static str, pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<()> {
    let s = pred.shape();
    if gt.shape() != s || mask.shape() != Shape::new(1, s.h, s.w) {
        return Err(Error::shape(
            op,
            format!("prediction {s}, ground truth {}, mask {}", gt.shape(), mask.shape()),
        ));
    }
    if !mask.data().iter().any(|&m| m != 0.0) {
        return Err(Error::EmptyMask(op));
    }
    Ok(())
}

/// Euclidean residual norm over `channels` at pixel `i`.
fn residual_norm(pred: &Tensor, gt: &Tensor, channels: &std::ops::Range<usize>, i: usize) -> f64 {
    let p = pred.shape().plane();
    channels
        .clone()
        .map(|c| {
            let d = pred.data()[c * p + i] as f64 - gt.data()[c * p + i] as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn norm(t: &Tensor, channels: &std::ops::Range<usize>, i: usize) -> f64 {
    let p = t.shape().plane();
    channels
        .clone()
        .map(|c| (t.data()[c * p + i] as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Outlier rule on one pixel: error above 3 px and above 5 % of the
/// ground-truth magnitude.
pub fn is_outlier(epe: f64, gt_norm: f64) -> bool {
    epe > KOE_ABS && epe > KOE_REL * gt_norm
}

/// Running sums for metrics pooled over the pixels of many samples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Pooled {
    pub pixels: usize,
    pub epe_sum: f64,
    pub elements: usize,
    pub abs_sum: f64,
    pub sq_sum: f64,
    /// Outlier pixels per channel group.
    pub outliers: Vec<usize>,
}

impl Pooled {
    pub fn add(&mut self, pred: &Tensor, gt: &Tensor, mask: &Tensor, groups: &[std::ops::Range<usize>]) -> Result<()> {
        check("metrics", pred, gt, mask)?;
        let s = pred.shape();
        let p = s.plane();
        let all = 0..s.c;
        if self.outliers.len() != groups.len() {
            self.outliers = vec![0; groups.len()];
        }
        for i in 0..p {
            if mask.data()[i] == 0.0 {
                continue;
            }
            self.pixels += 1;
            self.epe_sum += residual_norm(pred, gt, &all, i);
            for c in 0..s.c {
                let d = (pred.data()[c * p + i] as f64 - gt.data()[c * p + i] as f64).abs();
                self.abs_sum += d;
                self.sq_sum += d * d;
                self.elements += 1;
            }
            for (g, range) in groups.iter().enumerate() {
                if is_outlier(residual_norm(pred, gt, range, i), norm(gt, range, i)) {
                    self.outliers[g] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn epe(&self) -> f64 {
        self.epe_sum / self.pixels as f64
    }

    pub fn mae(&self) -> f64 {
        self.abs_sum / self.elements as f64
    }

    pub fn rmse(&self) -> f64 {
        (self.sq_sum / self.elements as f64).sqrt()
    }

    pub fn koe(&self, group: usize) -> f64 {
        100.0 * self.outliers[group] as f64 / self.pixels as f64
    }
}

pub fn metric_epe(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<f64> {
    let mut p = Pooled::default();
    p.add(pred, gt, mask, &[])?;
    Ok(p.epe())
}

/// Mean absolute error over every channel of the valid pixels.
pub fn metric_mae(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<f64> {
    let mut p = Pooled::default();
    p.add(pred, gt, mask, &[])?;
    Ok(p.mae())
}

pub fn metric_rmse(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<f64> {
    let mut p = Pooled::default();
    p.add(pred, gt, mask, &[])?;
    Ok(p.rmse())
}

/// Percentage of valid pixels that are outliers over the full vector.
pub fn metric_koe(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<f64> {
    let mut p = Pooled::default();
    p.add(pred, gt, mask, &[0..pred.shape().c])?;
    Ok(p.koe(0))
}

/// Channel groups of the per-component scene-flow outlier rates: `D0`,
/// `D1`, optical flow and all four channels.
pub fn scene_flow_groups() -> [(&'static str, std::ops::Range<usize>); 4] {
    [("koe_d0", 0..1), ("koe_d1", 1..2), ("koe_of", 2..4), ("koe_sf", 0..4)]
}

/// Outlier rejection counts: input outliers and how many of them the
/// prediction fixed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OrrCounts {
    pub input_outliers: usize,
    pub corrected: usize,
}

impl OrrCounts {
    pub fn add(&mut self, sparse: &MaskedFeature, pred: &Tensor, gt: &Tensor, gt_mask: &Tensor) -> Result<()> {
        check("metric_orr", pred, gt, gt_mask)?;
        if sparse.features.shape() != pred.shape() {
            return Err(Error::shape(
                "metric_orr",
                format!("sparse {} vs prediction {}", sparse.features.shape(), pred.shape()),
            ));
        }
        let all = 0..pred.shape().c;
        let mut overlap = false;
        for i in 0..pred.shape().plane() {
            if sparse.mask.data()[i] == 0.0 || gt_mask.data()[i] == 0.0 {
                continue;
            }
            overlap = true;
            let gn = norm(gt, &all, i);
            if is_outlier(residual_norm(&sparse.features, gt, &all, i), gn) {
                self.input_outliers += 1;
                if !is_outlier(residual_norm(pred, gt, &all, i), gn) {
                    self.corrected += 1;
                }
            }
        }
        if !overlap {
            return Err(Error::EmptyMask("metric_orr"));
        }
        Ok(())
    }

    /// Percentage corrected; `(100, true)` when there was nothing to correct.
    pub fn rate(&self) -> (f64, bool) {
        if self.input_outliers == 0 {
            (100.0, true)
        } else {
            (100.0 * self.corrected as f64 / self.input_outliers as f64, false)
        }
    }
}

/// Percentage of input outliers the prediction corrects, and whether the
/// value is vacuous (no input outliers).
pub fn metric_orr(sparse: &MaskedFeature, pred: &Tensor, gt: &Tensor, gt_mask: &Tensor) -> Result<(f64, bool)> {
    let mut c = OrrCounts::default();
    c.add(sparse, pred, gt, gt_mask)?;
    Ok(c.rate())
}

/// Valid pixels within `margin` of the image border.
pub fn border_band(mask: &Tensor, margin: usize) -> Result<Tensor> {
    let s = mask.shape();
    if s.h <= 2 * margin || s.w <= 2 * margin {
        return Err(Error::shape(
            "metric_boundary",
            format!("{}x{} too small for a {margin} px band", s.h, s.w),
        ));
    }
    Ok(Tensor::from_fn(s, |_, y, x| {
        let edge = y < margin || x < margin || y >= s.h - margin || x >= s.w - margin;
        if edge && mask.get(0, y, x) != 0.0 {
            1.0
        } else {
            0.0
        }
    }))
}

/// MAE and RMSE restricted to the border band.
pub fn metric_boundary(pred: &Tensor, gt: &Tensor, gt_mask: &Tensor, margin: usize) -> Result<(f64, f64)> {
    let band = border_band(gt_mask, margin)?;
    let mut p = Pooled::default();
    p.add(pred, gt, &band, &[])?;
    Ok((p.mae(), p.rmse()))
}
