//! Image-guided spatially-variant propagation.
//!
//! Affinity blocks turn image features into one `K × K` kernel per pixel
//! (centre weight fixed to 1). [`Graph::propagate`] applies those kernels
//! depthwise to a masked feature, normalizing by the number of valid pixels
//! in each window, and [`SsgpModule`] follows that with a sparse 1×1 channel
//! mix. The dense refinement stage iterates a stabilized variant of the same
//! filter on an already dense map.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::layers::{Activation, Conv2d};
use crate::param::{InitMode, ParamStore};
use crate::scalar::Scalar;
use crate::sparse::{MaskedFeature, MaskedVar};
use crate::tensor::{Shape, Tensor};

/// Added to the absolute kernel sum before normalization.
pub const STABILITY_EPS: f64 = 1e-8;

/// Off-centre kernel weights of a `K × K` window per pixel, `[K²−1, H, W]`,
/// row-major window order with the centre omitted. The centre weight is
/// implicitly 1.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityField<T: Scalar = f32> {
    pub kernels: Tensor<T>,
    pub k: usize,
}

impl<T: Scalar> AffinityField<T> {
    pub fn new(kernels: Tensor<T>, k: usize) -> Result<Self> {
        check_k(k)?;
        if kernels.shape().c != k * k - 1 {
            return Err(Error::shape(
                "affinity",
                format!("{} channels for K = {k}, expected {}", kernels.shape().c, k * k - 1),
            ));
        }
        Ok(AffinityField { kernels, k })
    }

    /// Centre-only kernels everywhere.
    pub fn identity(k: usize, h: usize, w: usize) -> Result<Self> {
        check_k(k)?;
        Self::new(Tensor::zeros(Shape::new(k * k - 1, h, w)), k)
    }

    /// Full `K × K` kernel at a pixel, centre included.
    pub fn kernel_at(&self, y: usize, x: usize) -> Vec<T> {
        let center = self.k * self.k / 2;
        (0..self.k * self.k)
            .map(|j| match j.cmp(&center) {
                std::cmp::Ordering::Less => self.kernels.get(j, y, x),
                std::cmp::Ordering::Equal => T::one(),
                std::cmp::Ordering::Greater => self.kernels.get(j - 1, y, x),
            })
            .collect()
    }
}

/// Refinement kernels after the stability transform.
#[derive(Clone, Debug, PartialEq)]
pub struct StabilizedAffinity<T: Scalar = f32> {
    pub off_center: Tensor<T>,
    pub center: Tensor<T>,
    pub k: usize,
}

fn check_k(k: usize) -> Result<()> {
    if k < 3 || k.is_multiple_of(2) {
        return Err(Error::Config(format!("propagation window K = {k} must be odd and >= 3")));
    }
    Ok(())
}

/// Affinity channel that holds window position `j`, or `None` for the centre.
#[inline]
fn affinity_slot(j: usize, center: usize) -> Option<usize> {
    match j.cmp(&center) {
        std::cmp::Ordering::Less => Some(j),
        std::cmp::Ordering::Equal => None,
        std::cmp::Ordering::Greater => Some(j - 1),
    }
}

/// Depthwise, sparsity-normalized spatially-variant filtering.
///
/// `affinity` has `K²−1` channels (flat, shared by all feature channels) or
/// `C·(K²−1)` channels when `per_channel`.
pub(crate) fn propagate_forward<T: Scalar>(
    x: &Tensor<T>,
    affinity: &Tensor<T>,
    mask: &Tensor<T>,
    k: usize,
    per_channel: bool,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let s = x.shape();
    let (h, w) = (s.h as isize, s.w as isize);
    let r = (k / 2) as isize;
    let nk = k * k - 1;
    let center = k * k / 2;
    let m = mask.data();
    let p = s.plane();

    let mut inv = vec![T::zero(); p];
    let mut out_mask = Tensor::zeros(Shape::new(1, s.h, s.w));
    for y in 0..h {
        for xx in 0..w {
            let mut n = 0usize;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (qy, qx) = (y + dy, xx + dx);
                    if qy >= 0 && qx >= 0 && qy < h && qx < w && m[(qy * w + qx) as usize] != T::zero() {
                        n += 1;
                    }
                }
            }
            if n > 0 {
                let i = (y * w + xx) as usize;
                inv[i] = T::one() / T::from_usize(n).unwrap();
                out_mask.data_mut()[i] = T::one();
            }
        }
    }

    let mut out = Tensor::zeros(s);
    for c in 0..s.c {
        let src = x.channel(c);
        let abase = if per_channel { c * nk } else { 0 };
        let dst = out.channel_mut(c);
        for y in 0..h {
            for xx in 0..w {
                let i = (y * w + xx) as usize;
                if inv[i] == T::zero() {
                    continue;
                }
                let mut acc = T::zero();
                let mut j = 0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (qy, qx) = (y + dy, xx + dx);
                        if qy >= 0 && qx >= 0 && qy < h && qx < w {
                            let q = (qy * w + qx) as usize;
                            if m[q] != T::zero() {
                                let wgt = match affinity_slot(j, center) {
                                    Some(a) => affinity.data()[(abase + a) * p + i],
                                    None => T::one(),
                                };
                                acc += src[q] * wgt;
                            }
                        }
                        j += 1;
                    }
                }
                dst[i] = acc * inv[i];
            }
        }
    }
    (out, out_mask, inv)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn propagate_backward<T: Scalar>(
    x: &Tensor<T>,
    affinity: &Tensor<T>,
    mask: &Tensor<T>,
    inv: &[T],
    gout: &Tensor<T>,
    k: usize,
    per_channel: bool,
    want_dx: bool,
    want_daff: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let s = x.shape();
    let (h, w) = (s.h as isize, s.w as isize);
    let r = (k / 2) as isize;
    let nk = k * k - 1;
    let center = k * k / 2;
    let m = mask.data();
    let p = s.plane();
    let mut dx = want_dx.then(|| vec![T::zero(); s.len()]);
    let mut daff = want_daff.then(|| vec![T::zero(); affinity.data().len()]);
    for c in 0..s.c {
        let src = x.channel(c);
        let go = gout.channel(c);
        let abase = if per_channel { c * nk } else { 0 };
        for y in 0..h {
            for xx in 0..w {
                let i = (y * w + xx) as usize;
                if inv[i] == T::zero() {
                    continue;
                }
                let g = go[i] * inv[i];
                let mut j = 0;
                for dy in -r..=r {
                    for ddx in -r..=r {
                        let (qy, qx) = (y + dy, xx + ddx);
                        if qy >= 0 && qx >= 0 && qy < h && qx < w {
                            let q = (qy * w + qx) as usize;
                            if m[q] != T::zero() {
                                match affinity_slot(j, center) {
                                    Some(a) => {
                                        let ai = (abase + a) * p + i;
                                        if let Some(dx) = dx.as_mut() {
                                            dx[c * p + q] += g * affinity.data()[ai];
                                        }
                                        if let Some(da) = daff.as_mut() {
                                            da[ai] += g * src[q];
                                        }
                                    }
                                    None => {
                                        if let Some(dx) = dx.as_mut() {
                                            dx[c * p + q] += g;
                                        }
                                    }
                                }
                            }
                        }
                        j += 1;
                    }
                }
            }
        }
    }
    (dx, daff)
}

/// `[G·(K²−1)]` raw weights to `[G·K²]` stabilized weights, centre included:
/// `â = |a| / (Σ|a| + ε)`, `centre = 1 − Σâ`.
pub(crate) fn stabilize_forward<T: Scalar>(raw: &Tensor<T>, k: usize) -> Tensor<T> {
    let s = raw.shape();
    let nk = k * k - 1;
    let center = k * k / 2;
    let groups = s.c / nk;
    let p = s.plane();
    let eps = T::from_f64_lossy(STABILITY_EPS);
    let mut out = Tensor::zeros(Shape::new(groups * k * k, s.h, s.w));
    let rd = raw.data();
    let od = out.data_mut();
    for g in 0..groups {
        for i in 0..p {
            let mut abs_sum = T::zero();
            for a in 0..nk {
                abs_sum += rd[(g * nk + a) * p + i].abs();
            }
            let denom = abs_sum + eps;
            let mut off_sum = T::zero();
            for j in 0..k * k {
                if let Some(a) = affinity_slot(j, center) {
                    let v = rd[(g * nk + a) * p + i].abs() / denom;
                    od[(g * k * k + j) * p + i] = v;
                    off_sum += v;
                }
            }
            od[(g * k * k + center) * p + i] = T::one() - off_sum;
        }
    }
    out
}

pub(crate) fn stabilize_backward<T: Scalar>(raw: &Tensor<T>, gout: &Tensor<T>, k: usize) -> Vec<T> {
    let s = raw.shape();
    let nk = k * k - 1;
    let center = k * k / 2;
    let groups = s.c / nk;
    let p = s.plane();
    let eps = T::from_f64_lossy(STABILITY_EPS);
    let rd = raw.data();
    let gd = gout.data();
    let mut d = vec![T::zero(); rd.len()];
    for g in 0..groups {
        for i in 0..p {
            let mut abs_sum = T::zero();
            for a in 0..nk {
                abs_sum += rd[(g * nk + a) * p + i].abs();
            }
            let denom = abs_sum + eps;
            let gc = gd[(g * k * k + center) * p + i];
            // Σ_i (g_i − g_c)·|a_i|
            let mut weighted = T::zero();
            for j in 0..k * k {
                if let Some(a) = affinity_slot(j, center) {
                    weighted += (gd[(g * k * k + j) * p + i] - gc) * rd[(g * nk + a) * p + i].abs();
                }
            }
            for j in 0..k * k {
                if let Some(a) = affinity_slot(j, center) {
                    let av = rd[(g * nk + a) * p + i];
                    let sign = if av > T::zero() {
                        T::one()
                    } else if av < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    let gj = gd[(g * k * k + j) * p + i] - gc;
                    d[(g * nk + a) * p + i] = sign * (gj / denom - weighted / (denom * denom));
                }
            }
        }
    }
    d
}

/// One refinement iteration: each channel is filtered with its own
/// stabilized kernel set; taps outside the image read the centre pixel.
pub(crate) fn cspn_step_forward<T: Scalar>(x: &Tensor<T>, weights: &Tensor<T>, k: usize) -> Tensor<T> {
    let s = x.shape();
    let (h, w) = (s.h as isize, s.w as isize);
    let r = (k / 2) as isize;
    let p = s.plane();
    let wd = weights.data();
    let mut out = Tensor::zeros(s);
    for c in 0..s.c {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..h {
            for xx in 0..w {
                let i = (y * w + xx) as usize;
                let mut acc = T::zero();
                let mut j = 0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (qy, qx) = (y + dy, xx + dx);
                        let q = if qy >= 0 && qx >= 0 && qy < h && qx < w {
                            (qy * w + qx) as usize
                        } else {
                            i
                        };
                        acc += wd[(c * k * k + j) * p + i] * src[q];
                        j += 1;
                    }
                }
                dst[i] = acc;
            }
        }
    }
    out
}

pub(crate) fn cspn_step_backward<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    gout: &Tensor<T>,
    k: usize,
) -> (Vec<T>, Vec<T>) {
    let s = x.shape();
    let (h, w) = (s.h as isize, s.w as isize);
    let r = (k / 2) as isize;
    let p = s.plane();
    let wd = weights.data();
    let mut dx = vec![T::zero(); s.len()];
    let mut dw = vec![T::zero(); wd.len()];
    for c in 0..s.c {
        let src = x.channel(c);
        let go = gout.channel(c);
        for y in 0..h {
            for xx in 0..w {
                let i = (y * w + xx) as usize;
                let g = go[i];
                let mut j = 0;
                for dy in -r..=r {
                    for ddx in -r..=r {
                        let (qy, qx) = (y + dy, xx + ddx);
                        let q = if qy >= 0 && qx >= 0 && qy < h && qx < w {
                            (qy * w + qx) as usize
                        } else {
                            i
                        };
                        let wi = (c * k * k + j) * p + i;
                        dx[c * p + q] += g * wd[wi];
                        dw[wi] += g * src[q];
                        j += 1;
                    }
                }
            }
        }
    }
    (dx, dw)
}

impl<T: Scalar> Graph<T> {
    /// Stage 1 of sparse spatial guided propagation: every channel is
    /// filtered with the per-pixel kernels (centre fixed to 1) over valid
    /// pixels and divided by the number of valid pixels in the window.
    pub fn propagate(
        &mut self,
        input: &MaskedVar<T>,
        affinity: Var,
        k: usize,
        per_channel: bool,
    ) -> Result<MaskedVar<T>> {
        check_k(k)?;
        let s = self.shape(input.features);
        let a = self.shape(affinity);
        let expect_c = if per_channel { s.c * (k * k - 1) } else { k * k - 1 };
        if (a.h, a.w) != (s.h, s.w) || a.c != expect_c {
            return Err(Error::shape(
                "propagate",
                format!("affinity {a} for features {s}, expected {expect_c} channels"),
            ));
        }
        if input.mask.shape() != Shape::new(1, s.h, s.w) {
            return Err(Error::shape("propagate", format!("mask {} for {s}", input.mask.shape())));
        }
        let (out, mask, inv_count) = propagate_forward(
            self.value(input.features),
            self.value(affinity),
            &input.mask,
            k,
            per_channel,
        );
        let rg = self.needs(input.features) || self.needs(affinity);
        let y = self.push(
            out,
            Op::Propagate {
                x: input.features,
                affinity,
                mask: input.mask.clone(),
                k,
                per_channel,
                inv_count,
            },
            rg,
        );
        Ok(MaskedVar { features: y, mask })
    }

    /// Stability transform of raw refinement affinities; returns the full
    /// `[G·K²]` kernels with centre weights.
    pub fn stabilize(&mut self, raw: Var, k: usize) -> Result<Var> {
        check_k(k)?;
        let s = self.shape(raw);
        if !s.c.is_multiple_of(k * k - 1) {
            return Err(Error::shape("stabilize", format!("{s} not a multiple of K²−1")));
        }
        let out = stabilize_forward(self.value(raw), k);
        let rg = self.needs(raw);
        Ok(self.push(out, Op::Stabilize { raw, k }, rg))
    }

    /// One stabilized propagation iteration on a dense map.
    pub fn cspn_step(&mut self, x: Var, weights: Var, k: usize) -> Result<Var> {
        let s = self.shape(x);
        let ws = self.shape(weights);
        if ws != Shape::new(s.c * k * k, s.h, s.w) {
            return Err(Error::shape("cspn_step", format!("weights {ws} for {s}")));
        }
        let out = cspn_step_forward(self.value(x), self.value(weights), k);
        let rg = self.needs(x) || self.needs(weights);
        Ok(self.push(out, Op::CspnStep { x, weights, k }, rg))
    }
}

/// Image features to per-pixel propagation kernels: a 3×3 ReLU
/// pre-transform at constant depth and a linear 3×3 head. The head is
/// zero-initialized so every kernel starts as the centre-only identity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AffinityBlock {
    pub pre: Conv2d,
    pub head: Conv2d,
    pub k: usize,
    /// Feature channels served with separate kernels; `None` for a flat map.
    pub per_channel: Option<usize>,
}

impl AffinityBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        feature_channels: usize,
        k: usize,
        per_channel: Option<usize>,
    ) -> Result<Self> {
        check_k(k)?;
        let pre = Conv2d::new(
            store,
            rng,
            &format!("{name}.pre"),
            feature_channels,
            feature_channels,
            3,
            1,
            InitMode::ReluScaled,
        )?;
        let out = per_channel.unwrap_or(1) * (k * k - 1);
        let head = Conv2d::new(store, rng, &format!("{name}.head"), feature_channels, out, 3, 1, InitMode::Zeros)?;
        // constant unit kernels: a masked box filter until guidance is learned
        store.get_mut(head.bias).value.fill(T::one());
        Ok(AffinityBlock {
            pre,
            head,
            k,
            per_channel,
        })
    }

    pub fn predict<T: Scalar>(&self, g: &mut Graph<T>, params: &ParamStore<T>, features: Var) -> Result<Var> {
        let h = g.conv2d(params, &self.pre, features, Activation::Relu)?;
        g.conv2d(params, &self.head, h, Activation::Linear)
    }

    /// Evaluate outside a training graph; flat blocks only.
    pub fn predict_field<T: Scalar>(&self, params: &ParamStore<T>, features: &Tensor<T>) -> Result<AffinityField<T>> {
        if self.per_channel.is_some() {
            return Err(Error::Config("predict_field needs a flat affinity block".into()));
        }
        let mut g = Graph::new();
        let f = g.input(features.clone());
        let a = self.predict(&mut g, params, f)?;
        AffinityField::new(g.value(a).clone(), self.k)
    }

    pub fn param_count(&self) -> usize {
        self.pre.param_count() + self.head.param_count()
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.pre.flops(h, w) + self.head.flops(h, w)
    }
}

/// Guided propagation followed by a sparse 1×1 channel mix with ReLU.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SsgpModule {
    pub mix: Conv2d,
    pub k: usize,
    pub per_channel: bool,
}

impl SsgpModule {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        per_channel: bool,
    ) -> Result<Self> {
        check_k(k)?;
        let mix = Conv2d::new(store, rng, &format!("{name}.mix"), c_in, c_out, 1, 1, InitMode::MaskNormalized)?;
        Ok(SsgpModule { mix, k, per_channel })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        input: &MaskedVar<T>,
        affinity: Var,
    ) -> Result<MaskedVar<T>> {
        let spread = g.propagate(input, affinity, self.k, self.per_channel)?;
        g.sparse_conv2d(params, &self.mix, &spread, Activation::Relu)
    }

    pub fn param_count(&self) -> usize {
        self.mix.param_count()
    }

    /// Propagation: two FLOPs per tap and channel, the window mask count and
    /// one normalization per element; plus the mix and its normalization.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let (c, kk, px) = (self.mix.c_in as u64, (self.k * self.k) as u64, (h * w) as u64);
        let spread = 2 * c * kk * px + kk * px + c * px;
        spread + sparse_conv_flops(&self.mix, h, w)
    }
}

/// Dense conv FLOPs plus input masking, window counting and normalization.
pub(crate) fn sparse_conv_flops(layer: &Conv2d, h: usize, w: usize) -> u64 {
    let (ho, wo) = (h.div_ceil(layer.stride), w.div_ceil(layer.stride));
    layer.flops(h, w)
        + (layer.c_in * h * w) as u64
        + (layer.kernel * layer.kernel * ho * wo) as u64
        + (layer.c_out * ho * wo) as u64
}

/// Dense refinement: a single 3×3 conv on image features predicts raw
/// kernels for every output channel, which are stabilized and iterated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RefinementHead {
    pub head: Conv2d,
    pub k: usize,
    pub channels: usize,
    pub iterations: usize,
}

impl RefinementHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        feature_channels: usize,
        channels: usize,
        k: usize,
        iterations: usize,
    ) -> Result<Self> {
        check_k(k)?;
        // Random rather than zero init: the stability transform has a 1/ε
        // slope at an all-zero kernel.
        let head = Conv2d::new(
            store,
            rng,
            &format!("{name}.head"),
            feature_channels,
            channels * (k * k - 1),
            3,
            1,
            InitMode::ReluScaled,
        )?;
        Ok(RefinementHead {
            head,
            k,
            channels,
            iterations,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        dense: Var,
        features: Var,
    ) -> Result<Var> {
        let raw = g.conv2d(params, &self.head, features, Activation::Linear)?;
        cspn_refine(g, dense, raw, self.k, self.iterations)
    }

    pub fn param_count(&self) -> usize {
        self.head.param_count()
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let kk = (self.k * self.k) as u64;
        let px = (h * w) as u64;
        let c = self.channels as u64;
        // |a|, the sum, the division per tap and the centre
        let stabilize = c * px * (3 * (kk - 1) + 1);
        let iterate = self.iterations as u64 * 2 * c * kk * px;
        self.head.flops(h, w) + stabilize + iterate
    }
}

/// Stabilize `raw` (`C·(K²−1)` channels for a `C`-channel `dense` map) and
/// run `iterations` propagation steps.
pub fn cspn_refine<T: Scalar>(g: &mut Graph<T>, dense: Var, raw: Var, k: usize, iterations: usize) -> Result<Var> {
    let s = g.shape(dense);
    let r = g.shape(raw);
    if r != Shape::new(s.c * (k * k - 1), s.h, s.w) {
        return Err(Error::shape("cspn_refine", format!("raw affinity {r} for dense {s}")));
    }
    let weights = g.stabilize(raw, k)?;
    let mut x = dense;
    for _ in 0..iterations {
        x = g.cspn_step(x, weights, k)?;
    }
    Ok(x)
}

/// Stability transform outside a graph.
pub fn stability_transform<T: Scalar>(raw: &AffinityField<T>) -> StabilizedAffinity<T> {
    let k = raw.k;
    let full = stabilize_forward(&raw.kernels, k);
    let s = full.shape();
    let center = k * k / 2;
    let off = Tensor::from_fn(Shape::new(k * k - 1, s.h, s.w), |a, y, x| {
        let j = if a < center { a } else { a + 1 };
        full.get(j, y, x)
    });
    StabilizedAffinity {
        off_center: off,
        center: full.slice_channels(center..center + 1).expect("centre channel"),
        k,
    }
}

/// Stage-1 propagation outside a graph with one flat kernel set.
pub fn propagate_flat<T: Scalar>(input: &MaskedFeature<T>, affinity: &AffinityField<T>) -> Result<MaskedFeature<T>> {
    let mut g = Graph::new();
    let x = g.masked_input(input);
    let a = g.input(affinity.kernels.clone());
    let y = g.propagate(&x, a, affinity.k, false)?;
    Ok(g.masked_value(&y))
}

/// Stage-1 propagation outside a graph with one kernel set per channel.
pub fn propagate_per_channel<T: Scalar>(
    input: &MaskedFeature<T>,
    affinities: &[AffinityField<T>],
) -> Result<MaskedFeature<T>> {
    let c = input.shape().c;
    if affinities.len() != c {
        return Err(Error::shape(
            "propagate_per_channel",
            format!("{} affinity fields for {c} channels", affinities.len()),
        ));
    }
    let k = affinities[0].k;
    if affinities.iter().any(|a| a.k != k) {
        return Err(Error::Config("affinity fields disagree on K".into()));
    }
    let mut stacked = affinities[0].kernels.clone();
    for a in &affinities[1..] {
        stacked = stacked.concat(&a.kernels)?;
    }
    let mut g = Graph::new();
    let x = g.masked_input(input);
    let a = g.input(stacked);
    let y = g.propagate(&x, a, k, true)?;
    Ok(g.masked_value(&y))
}
