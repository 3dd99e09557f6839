//! Sparsity-aware primitives on feature/mask pairs.
//!
//! Every op here normalizes by the number of valid pixels in its window and
//! emits an updated binary mask: an output pixel is valid iff its window
//! contained at least one valid input. Padding is treated as invalid, so
//! values outside the image never contribute. Masks are constants for the
//! backward pass.

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::kernels::{self, ConvGeom};
use crate::layers::{Activation, Conv2d};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Features `[C, H, W]` paired with a binary validity mask `[1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedFeature<T: Scalar = f32> {
    pub features: Tensor<T>,
    pub mask: Tensor<T>,
}

impl<T: Scalar> MaskedFeature<T> {
    pub fn new(features: Tensor<T>, mask: Tensor<T>) -> Result<Self> {
        let s = features.shape();
        if mask.shape() != Shape::new(1, s.h, s.w) {
            return Err(Error::shape(
                "masked_feature",
                format!("mask {} does not match features {s}", mask.shape()),
            ));
        }
        if !is_binary(&mask) {
            return Err(Error::Config("mask values must be 0 or 1".into()));
        }
        Ok(MaskedFeature { features, mask })
    }

    /// Fully valid features.
    pub fn dense(features: Tensor<T>) -> Self {
        let s = features.shape();
        MaskedFeature {
            features,
            mask: Tensor::ones(Shape::new(1, s.h, s.w)),
        }
    }

    pub fn shape(&self) -> Shape {
        self.features.shape()
    }

    /// Fraction of valid pixels.
    pub fn density(&self) -> f64 {
        mask_density(&self.mask)
    }

    pub fn cast<U: Scalar>(&self) -> MaskedFeature<U> {
        MaskedFeature {
            features: self.features.cast(),
            mask: self.mask.cast(),
        }
    }
}

/// A masked feature recorded on a [`Graph`]; only the features are
/// differentiable.
#[derive(Clone, Debug)]
pub struct MaskedVar<T: Scalar = f32> {
    pub features: Var,
    pub mask: Tensor<T>,
}

pub fn is_binary<T: Scalar>(mask: &Tensor<T>) -> bool {
    mask.data().iter().all(|&m| m == T::zero() || m == T::one())
}

pub fn mask_density<T: Scalar>(mask: &Tensor<T>) -> f64 {
    let n = mask.data().len();
    if n == 0 {
        return 0.0;
    }
    mask.data().iter().filter(|&&m| m != T::zero()).count() as f64 / n as f64
}

/// Per output pixel number of valid entries in the convolution window.
pub(crate) fn window_counts<T: Scalar>(mask: &Tensor<T>, g: &ConvGeom) -> Vec<usize> {
    let m = mask.data();
    let mut counts = vec![0usize; g.ho * g.wo];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let mut n = 0;
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy as usize >= g.h {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix as usize >= g.w {
                        continue;
                    }
                    if m[iy as usize * g.w + ix as usize] != T::zero() {
                        n += 1;
                    }
                }
            }
            counts[oy * g.wo + ox] = n;
        }
    }
    counts
}

fn inverse_counts<T: Scalar>(counts: &[usize]) -> (Vec<T>, Vec<T>) {
    let inv: Vec<T> = counts
        .iter()
        .map(|&n| if n > 0 { T::one() / T::from_usize(n).unwrap() } else { T::zero() })
        .collect();
    let mask = inv
        .iter()
        .map(|&v| if v > T::zero() { T::one() } else { T::zero() })
        .collect();
    (inv, mask)
}

fn masked_copy<T: Scalar>(x: &Tensor<T>, mask: &Tensor<T>) -> Tensor<T> {
    let mut xm = x.clone();
    let p = x.shape().plane();
    for chunk in xm.data_mut().chunks_exact_mut(p) {
        chunk.iter_mut().zip(mask.data()).for_each(|(v, &m)| {
            if m == T::zero() {
                *v = T::zero();
            }
        });
    }
    xm
}

/// Normalized sparse convolution. Returns output features, output mask and
/// the per-pixel inverse counts needed by the backward pass.
pub(crate) fn sparse_conv_forward<T: Scalar>(
    x: &Tensor<T>,
    mask: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    c_out: usize,
    g: &ConvGeom,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let xm = masked_copy(x, mask);
    let mut out = kernels::conv_forward(&xm, weight, None, c_out, g);
    let counts = window_counts(mask, g);
    let (inv, flat_mask) = inverse_counts::<T>(&counts);
    let n = g.ho * g.wo;
    for (co, chunk) in out.data_mut().chunks_exact_mut(n).enumerate() {
        for (v, &iv) in chunk.iter_mut().zip(&inv) {
            *v = if iv > T::zero() { *v * iv + bias[co] } else { T::zero() };
        }
    }
    let out_mask = Tensor::from_vec(Shape::new(1, g.ho, g.wo), flat_mask).unwrap();
    (out, out_mask, inv)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn sparse_conv_backward<T: Scalar>(
    x: &Tensor<T>,
    mask: &Tensor<T>,
    inv: &[T],
    weight: &[T],
    dout: &Tensor<T>,
    c_out: usize,
    g: &ConvGeom,
    dw: &mut [T],
    db: &mut [T],
    want_dx: bool,
) -> Option<Vec<T>> {
    let n = g.ho * g.wo;
    let mut scaled = dout.data().to_vec();
    for (co, chunk) in scaled.chunks_exact_mut(n).enumerate() {
        let mut acc = T::zero();
        for (v, &iv) in chunk.iter_mut().zip(inv) {
            if iv > T::zero() {
                acc += *v;
            }
            *v *= iv;
        }
        db[co] += acc;
    }
    let xm = masked_copy(x, mask);
    let dxm = kernels::conv_backward(&xm, weight, &scaled, c_out, g, dw, None, want_dx)?;
    let p = g.h * g.w;
    let mut dx = dxm;
    for chunk in dx.chunks_exact_mut(p) {
        chunk.iter_mut().zip(mask.data()).for_each(|(v, &m)| *v *= m);
    }
    Some(dx)
}

pub(crate) fn pool_geom(s: Shape) -> ConvGeom {
    ConvGeom::same(Shape::new(1, s.h, s.w), 3, 2)
}

/// 3×3 stride-2 average over valid entries only.
pub(crate) fn avg_pool_forward<T: Scalar>(
    x: &Tensor<T>,
    mask: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Vec<T>, ConvGeom) {
    let s = x.shape();
    let g = pool_geom(s);
    let counts = window_counts(mask, &g);
    let (inv, flat_mask) = inverse_counts::<T>(&counts);
    let m = mask.data();
    let mut out = Tensor::zeros(Shape::new(s.c, g.ho, g.wo));
    for c in 0..s.c {
        let plane = x.channel(c);
        let dst = out.channel_mut(c);
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let o = oy * g.wo + ox;
                if inv[o] == T::zero() {
                    continue;
                }
                let mut acc = T::zero();
                for iy in (oy * 2).saturating_sub(1)..(oy * 2 + 2).min(s.h) {
                    for ix in (ox * 2).saturating_sub(1)..(ox * 2 + 2).min(s.w) {
                        let i = iy * s.w + ix;
                        if m[i] != T::zero() {
                            acc += plane[i];
                        }
                    }
                }
                dst[o] = acc * inv[o];
            }
        }
    }
    let out_mask = Tensor::from_vec(Shape::new(1, g.ho, g.wo), flat_mask).unwrap();
    (out, out_mask, inv, g)
}

pub(crate) fn avg_pool_backward<T: Scalar>(
    in_shape: Shape,
    mask: &Tensor<T>,
    inv: &[T],
    dout: &Tensor<T>,
    g: &ConvGeom,
) -> Vec<T> {
    let s = in_shape;
    let m = mask.data();
    let mut dx = vec![T::zero(); s.len()];
    for c in 0..s.c {
        let go = dout.channel(c);
        let dplane = &mut dx[c * s.plane()..(c + 1) * s.plane()];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let o = oy * g.wo + ox;
                if inv[o] == T::zero() {
                    continue;
                }
                let share = go[o] * inv[o];
                for iy in (oy * 2).saturating_sub(1)..(oy * 2 + 2).min(s.h) {
                    for ix in (ox * 2).saturating_sub(1)..(ox * 2 + 2).min(s.w) {
                        let i = iy * s.w + ix;
                        if m[i] != T::zero() {
                            dplane[i] += share;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Replicate every pixel into a 2×2 block.
pub(crate) fn upsample_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.c, 2 * s.h, 2 * s.w), |c, y, xx| x.get(c, y / 2, xx / 2))
}

pub(crate) fn upsample_backward<T: Scalar>(in_shape: Shape, dout: &Tensor<T>) -> Vec<T> {
    let o = dout.shape();
    let mut dx = vec![T::zero(); in_shape.len()];
    for c in 0..o.c {
        for y in 0..o.h {
            for x in 0..o.w {
                dx[(c * in_shape.h + y / 2) * in_shape.w + x / 2] += dout.get(c, y, x);
            }
        }
    }
    dx
}

impl<T: Scalar> Graph<T> {
    /// Record a constant masked input.
    pub fn masked_input(&mut self, m: &MaskedFeature<T>) -> MaskedVar<T> {
        MaskedVar {
            features: self.input(m.features.clone()),
            mask: m.mask.clone(),
        }
    }

    pub fn masked_value(&self, m: &MaskedVar<T>) -> MaskedFeature<T> {
        MaskedFeature {
            features: self.value(m.features).clone(),
            mask: m.mask.clone(),
        }
    }

    /// Sparsity-normalized convolution: the weighted window sum of valid
    /// features divided by the number of valid pixels in the window, plus
    /// bias; zero with mask 0 where the window holds no valid pixel.
    pub fn sparse_conv2d(
        &mut self,
        params: &ParamStore<T>,
        layer: &Conv2d,
        input: &MaskedVar<T>,
        act: Activation,
    ) -> Result<MaskedVar<T>> {
        let s = self.shape(input.features);
        layer.check_input(s)?;
        check_mask("sparse_conv2d", s, &input.mask)?;
        let geom = ConvGeom::same(s, layer.kernel, layer.stride);
        let (out, mask, inv_count) = sparse_conv_forward(
            self.value(input.features),
            &input.mask,
            &params.get(layer.weight).value,
            &params.get(layer.bias).value,
            layer.c_out,
            &geom,
        );
        let y = self.push(
            out,
            Op::SparseConv {
                x: input.features,
                weight: layer.weight,
                bias: layer.bias,
                geom,
                c_out: layer.c_out,
                mask: input.mask.clone(),
                inv_count,
            },
            true,
        );
        Ok(MaskedVar {
            features: self.activate(y, act),
            mask,
        })
    }

    /// 3×3 stride-2 sparse average pooling.
    pub fn sparse_avg_pool(&mut self, input: &MaskedVar<T>) -> Result<MaskedVar<T>> {
        let s = self.shape(input.features);
        check_mask("sparse_avg_pool", s, &input.mask)?;
        let (out, mask, inv_count, geom) = avg_pool_forward(self.value(input.features), &input.mask);
        let rg = self.needs(input.features);
        let y = self.push(
            out,
            Op::SparsePool {
                x: input.features,
                geom,
                mask: input.mask.clone(),
                inv_count,
            },
            rg,
        );
        Ok(MaskedVar { features: y, mask })
    }

    /// Nearest-neighbour 2× upsampling of features and mask, cropped to
    /// `h × w`.
    pub fn nn_upsample(&mut self, input: &MaskedVar<T>, h: usize, w: usize) -> Result<MaskedVar<T>> {
        let s = self.shape(input.features);
        check_mask("nn_upsample", s, &input.mask)?;
        if h > 2 * s.h || w > 2 * s.w {
            return Err(Error::shape("nn_upsample", format!("cannot crop {s} x2 to {h}x{w}")));
        }
        let out = upsample_forward(self.value(input.features));
        let rg = self.needs(input.features);
        let up = self.push(out, Op::Upsample(input.features), rg);
        let features = self.crop(up, h, w)?;
        let mask = upsample_forward(&input.mask).crop(h, w)?;
        Ok(MaskedVar { features, mask })
    }

    /// Zero out invalid pixels of both inputs, add them, OR the masks and
    /// merge with a 3×3 sparse convolution.
    pub fn sparse_skip_merge(
        &mut self,
        params: &ParamStore<T>,
        merge: &Conv2d,
        decoder: &MaskedVar<T>,
        encoder: &MaskedVar<T>,
        act: Activation,
    ) -> Result<MaskedVar<T>> {
        let sum = self.masked_add(decoder, encoder)?;
        self.sparse_conv2d(params, merge, &sum, act)
    }

    /// Sum of two masked features where invalid entries contribute zero; the
    /// result is valid where either input is.
    pub fn masked_add(&mut self, a: &MaskedVar<T>, b: &MaskedVar<T>) -> Result<MaskedVar<T>> {
        let (sa, sb) = (self.shape(a.features), self.shape(b.features));
        if sa != sb {
            return Err(Error::shape("sparse_skip_merge", format!("{sa} vs {sb}")));
        }
        check_mask("sparse_skip_merge", sa, &a.mask)?;
        check_mask("sparse_skip_merge", sb, &b.mask)?;
        let xa = self.mask_mul(a.features, &a.mask)?;
        let xb = self.mask_mul(b.features, &b.mask)?;
        let features = self.add(xa, xb)?;
        let mask = Tensor::from_vec(
            a.mask.shape(),
            a.mask
                .data()
                .iter()
                .zip(b.mask.data())
                .map(|(&x, &y)| if x != T::zero() || y != T::zero() { T::one() } else { T::zero() })
                .collect(),
        )?;
        Ok(MaskedVar { features, mask })
    }
}

fn check_mask<T: Scalar>(op: &'static str, s: Shape, mask: &Tensor<T>) -> Result<()> {
    if mask.shape() != Shape::new(1, s.h, s.w) {
        return Err(Error::shape(op, format!("mask {} for features {s}", mask.shape())));
    }
    Ok(())
}
