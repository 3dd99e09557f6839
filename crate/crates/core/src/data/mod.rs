//! Samples, the synthetic scene generator, sparsification, noise,
//! normalization, augmentation and on-disk formats.

pub mod dataset;
pub mod formats;
mod synth;

pub use synth::{scene_regions, synth_scene, SceneParams};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::sparse::{is_binary, MaskedFeature};
use crate::tensor::{Shape, Tensor};

/// Smallest standard deviation used when standardizing.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Depth,
    OpticalFlow,
    SceneFlow,
}

impl Task {
    /// Channels of the target map: 1, 2 or 4 (`D0, D1, u, v`).
    pub fn channels(self) -> usize {
        match self {
            Task::Depth => 1,
            Task::OpticalFlow => 2,
            Task::SceneFlow => 4,
        }
    }

    pub fn is_motion(self) -> bool {
        self != Task::Depth
    }
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "depth" => Ok(Task::Depth),
            "flow" | "optical_flow" => Ok(Task::OpticalFlow),
            "scene_flow" | "sceneflow" => Ok(Task::SceneFlow),
            _ => Err(format!("unknown task `{s}` (depth, flow, scene_flow)")),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Depth => "depth",
            Task::OpticalFlow => "flow",
            Task::SceneFlow => "scene_flow",
        })
    }
}

/// Guidance image, sparse input and ground truth on one pixel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub sparse: MaskedFeature,
    pub gt: Tensor,
    pub gt_mask: Tensor,
    pub task: Task,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        let s = self.image.shape();
        let c = self.task.channels();
        let plane = Shape::new(1, s.h, s.w);
        if s.c != 3
            || self.sparse.features.shape() != Shape::new(c, s.h, s.w)
            || self.gt.shape() != Shape::new(c, s.h, s.w)
            || self.sparse.mask.shape() != plane
            || self.gt_mask.shape() != plane
        {
            return Err(Error::shape(
                "sample",
                format!(
                    "image {s}, sparse {}, gt {}, gt mask {} for task {}",
                    self.sparse.features.shape(),
                    self.gt.shape(),
                    self.gt_mask.shape(),
                    self.task
                ),
            ));
        }
        if !is_binary(&self.gt_mask) {
            return Err(Error::Config("ground-truth mask is not binary".into()));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.image.shape().h
    }

    pub fn width(&self) -> usize {
        self.image.shape().w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    /// Each valid pixel kept independently with probability `density`.
    Uniform,
    /// Every `round(1/density)`-th row, each row shifted by up to `jitter`
    /// rows.
    Scanlines { jitter: usize },
}

/// Keep a random subset of the valid pixels of `dense`.
pub fn sparsify(dense: &Tensor, gt_mask: &Tensor, pattern: Pattern, density: f64, seed: u64) -> Result<MaskedFeature> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Config(format!("density {density} outside (0, 1]")));
    }
    let s = dense.shape();
    if gt_mask.shape() != Shape::new(1, s.h, s.w) {
        return Err(Error::shape("sparsify", format!("mask {} for {s}", gt_mask.shape())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = Tensor::zeros(gt_mask.shape());
    match pattern {
        Pattern::Uniform => {
            for (m, &g) in mask.data_mut().iter_mut().zip(gt_mask.data()) {
                let keep = density >= 1.0 || rng.gen::<f64>() < density;
                if g != 0.0 && keep {
                    *m = 1.0;
                }
            }
        }
        Pattern::Scanlines { jitter } => {
            let k = ((1.0 / density).round() as usize).max(1);
            for base in (0..s.h).step_by(k) {
                let shift = if jitter > 0 {
                    rng.gen_range(-(jitter as isize)..=jitter as isize)
                } else {
                    0
                };
                let y = (base as isize + shift).clamp(0, s.h as isize - 1) as usize;
                for x in 0..s.w {
                    if gt_mask.get(0, y, x) != 0.0 {
                        mask.set(0, y, x, 1.0);
                    }
                }
            }
        }
    }
    let features = apply_mask(dense, &mask);
    MaskedFeature::new(features, mask)
}

fn apply_mask(t: &Tensor, mask: &Tensor) -> Tensor {
    let p = t.shape().plane();
    let mut out = t.clone();
    for chunk in out.data_mut().chunks_exact_mut(p) {
        chunk.iter_mut().zip(mask.data()).for_each(|(v, &m)| *v *= m);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoiseKind {
    Gaussian,
    /// Scale parameter `b` of the Laplace distribution.
    Laplacian,
}

impl FromStr for NoiseKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gaussian" => Ok(NoiseKind::Gaussian),
            "laplacian" | "laplace" => Ok(NoiseKind::Laplacian),
            _ => Err(format!("unknown noise kind `{s}` (gaussian, laplacian)")),
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Laplacian => "laplacian",
        })
    }
}

/// I.i.d. noise on every channel of the valid pixels.
pub fn add_noise(values: &MaskedFeature, kind: NoiseKind, scale: f64, seed: u64) -> Result<MaskedFeature> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!("noise scale {scale} must be finite and >= 0")));
    }
    let mut out = values.clone();
    if scale == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, scale).map_err(|e| Error::Config(e.to_string()))?;
    let p = values.shape().plane();
    let mask = values.mask.data();
    for (i, v) in out.features.data_mut().iter_mut().enumerate() {
        if mask[i % p] == 0.0 {
            continue;
        }
        let n = match kind {
            NoiseKind::Gaussian => normal.sample(&mut rng),
            NoiseKind::Laplacian => {
                // open interval keeps the logarithm finite
                let mut u: f64 = rng.gen_range(-0.5..0.5);
                while u <= -0.5 {
                    u = rng.gen_range(-0.5..0.5);
                }
                -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
        };
        *v = (*v as f64 + n) as f32;
    }
    Ok(out)
}

/// Per-channel standardization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub image_mean: Vec<f64>,
    pub image_std: Vec<f64>,
    pub sparse_mean: Vec<f64>,
    pub sparse_std: Vec<f64>,
}

fn channel_stats(t: &Tensor, mask: Option<&Tensor>) -> (Vec<f64>, Vec<f64>) {
    let s = t.shape();
    let mut means = Vec::with_capacity(s.c);
    let mut stds = Vec::with_capacity(s.c);
    for c in 0..s.c {
        let vals: Vec<f64> = t
            .channel(c)
            .iter()
            .enumerate()
            .filter(|(i, _)| mask.is_none_or(|m| m.data()[*i] != 0.0))
            .map(|(_, &v)| v as f64)
            .collect();
        let n = vals.len().max(1) as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        means.push(mean);
        stds.push(var.sqrt().max(STD_FLOOR));
    }
    (means, stds)
}

fn standardize(t: &Tensor, mean: &[f64], std: &[f64], mask: Option<&Tensor>) -> Tensor {
    let p = t.shape().plane();
    let mut out = t.clone();
    for (c, chunk) in out.data_mut().chunks_exact_mut(p).enumerate() {
        for (i, v) in chunk.iter_mut().enumerate() {
            *v = if mask.is_none_or(|m| m.data()[i] != 0.0) {
                ((*v as f64 - mean[c]) / std[c]) as f32
            } else {
                0.0
            };
        }
    }
    out
}

/// Standardize the image over all pixels and the sparse input over its
/// valid pixels; the ground truth uses the sparse statistics.
pub fn normalize(sample: &Sample) -> Result<(Sample, NormStats)> {
    if !sample.sparse.mask.data().iter().any(|&m| m != 0.0) {
        return Err(Error::EmptyMask("normalize"));
    }
    let (image_mean, image_std) = channel_stats(&sample.image, None);
    let (sparse_mean, sparse_std) = channel_stats(&sample.sparse.features, Some(&sample.sparse.mask));
    let out = Sample {
        image: standardize(&sample.image, &image_mean, &image_std, None),
        sparse: MaskedFeature::new(
            standardize(&sample.sparse.features, &sparse_mean, &sparse_std, Some(&sample.sparse.mask)),
            sample.sparse.mask.clone(),
        )?,
        gt: standardize(&sample.gt, &sparse_mean, &sparse_std, Some(&sample.gt_mask)),
        gt_mask: sample.gt_mask.clone(),
        task: sample.task,
    };
    Ok((
        out,
        NormStats {
            image_mean,
            image_std,
            sparse_mean,
            sparse_std,
        },
    ))
}

/// Map a normalized target-space tensor back to original units.
pub fn denormalize(values: &Tensor, stats: &NormStats) -> Result<Tensor> {
    let s = values.shape();
    if s.c != stats.sparse_mean.len() {
        return Err(Error::shape(
            "denormalize",
            format!("{s} for {} normalized channels", stats.sparse_mean.len()),
        ));
    }
    let mut out = values.clone();
    for (c, chunk) in out.data_mut().chunks_exact_mut(s.plane()).enumerate() {
        for v in chunk {
            *v = (*v as f64 * stats.sparse_std[c] + stats.sparse_mean[c]) as f32;
        }
    }
    Ok(out)
}

/// Ranges of the random photometric changes.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentRanges {
    pub gamma: (f64, f64),
    pub brightness: (f64, f64),
    pub color: (f64, f64),
    pub noise_std: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            gamma: (0.7, 1.5),
            brightness: (0.8, 1.2),
            color: (0.9, 1.1),
            noise_std: 0.02,
        }
    }
}

impl AugmentRanges {
    pub fn identity() -> Self {
        AugmentRanges {
            gamma: (1.0, 1.0),
            brightness: (1.0, 1.0),
            color: (1.0, 1.0),
            noise_std: 0.0,
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Random gamma, brightness, per-channel colour scale and pixel noise on an
/// image in `[0, 1]`; the result is clamped to `[0, 1]`.
pub fn photometric_augment(image: &Tensor, ranges: &AugmentRanges, seed: u64) -> Result<Tensor> {
    let s = image.shape();
    if s.c != 3 {
        return Err(Error::shape("photometric_augment", format!("image {s} must have 3 channels")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = draw(&mut rng, ranges.gamma);
    let bright = draw(&mut rng, ranges.brightness);
    let color: Vec<f64> = (0..3).map(|_| draw(&mut rng, ranges.color)).collect();
    let noise = (ranges.noise_std > 0.0)
        .then(|| Normal::new(0.0, ranges.noise_std).map_err(|e| Error::Config(e.to_string())))
        .transpose()?;
    let mut out = image.clone();
    for (c, chunk) in out.data_mut().chunks_exact_mut(s.plane()).enumerate() {
        for v in chunk {
            let mut x = (*v as f64).clamp(0.0, 1.0).powf(gamma) * bright * color[c];
            if let Some(n) = &noise {
                x += n.sample(&mut rng);
            }
            *v = x.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(Shape::new(c, h, w), |c, y, x| (c * 100 + y * w + x) as f32 * 0.25 - 3.0)
    }

    #[test]
    fn full_density_keeps_the_ground_truth_support() {
        let gt = ramp(2, 8, 8);
        let mut m = Tensor::ones(Shape::new(1, 8, 8));
        m.set(0, 3, 3, 0.0);
        let sp = sparsify(&gt, &m, Pattern::Uniform, 1.0, 5).unwrap();
        assert_eq!(sp.mask, m);
        assert!(sparsify(&gt, &m, Pattern::Uniform, 0.0, 5).is_err());
    }

    #[test]
    fn scanlines_keep_every_kth_row() {
        let gt = ramp(1, 12, 5);
        let m = Tensor::ones(Shape::new(1, 12, 5));
        let sp = sparsify(&gt, &m, Pattern::Scanlines { jitter: 0 }, 0.25, 1).unwrap();
        for y in 0..12 {
            let expect = if y % 4 == 0 { 1.0 } else { 0.0 };
            assert!((0..5).all(|x| sp.mask.get(0, y, x) == expect));
        }
    }

    #[test]
    fn noise_leaves_invalid_pixels_alone() {
        let f = ramp(2, 6, 6);
        let m = Tensor::from_fn(Shape::new(1, 6, 6), |_, y, x| ((y + x) % 2) as f32);
        let sp = MaskedFeature::new(f, m).unwrap();
        for kind in [NoiseKind::Gaussian, NoiseKind::Laplacian] {
            assert_eq!(add_noise(&sp, kind, 0.0, 3).unwrap(), sp);
            let noisy = add_noise(&sp, kind, 2.0, 3).unwrap();
            assert_eq!(noisy.mask, sp.mask);
            for c in 0..2 {
                for y in 0..6 {
                    for x in 0..6 {
                        if sp.mask.get(0, y, x) == 0.0 {
                            assert_eq!(noisy.features.get(c, y, x).to_bits(), sp.features.get(c, y, x).to_bits());
                        }
                    }
                }
            }
        }
        assert!(add_noise(&sp, NoiseKind::Gaussian, -1.0, 0).is_err());
    }

    #[test]
    fn constant_sparse_channel_is_floored() {
        let s = Sample {
            image: Tensor::full(Shape::new(3, 4, 4), 0.5),
            sparse: MaskedFeature::dense(Tensor::full(Shape::new(1, 4, 4), 3.0)),
            gt: Tensor::full(Shape::new(1, 4, 4), 3.0),
            gt_mask: Tensor::ones(Shape::new(1, 4, 4)),
            task: Task::Depth,
        };
        let (n, stats) = normalize(&s).unwrap();
        assert_eq!(stats.sparse_std, vec![STD_FLOOR]);
        assert!(n.image.is_finite() && n.gt.is_finite());
        assert_eq!(denormalize(&n.gt, &stats).unwrap(), s.gt);
    }

    #[test]
    fn augment_identity_and_range() {
        let img = Tensor::from_fn(Shape::new(3, 5, 5), |c, y, x| ((c + y + x) % 5) as f32 / 4.0);
        assert_eq!(photometric_augment(&img, &AugmentRanges::identity(), 9).unwrap(), img);
        let a = photometric_augment(&img, &AugmentRanges::default(), 9).unwrap();
        assert_eq!(a, photometric_augment(&img, &AugmentRanges::default(), 9).unwrap());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn task_names() {
        for t in [Task::Depth, Task::OpticalFlow, Task::SceneFlow] {
            assert_eq!(t.to_string().parse::<Task>().unwrap(), t);
        }
        assert_eq!("optical_flow".parse::<Task>().unwrap(), Task::OpticalFlow);
    }
}
