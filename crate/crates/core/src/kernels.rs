//! Dense convolution kernels (im2col + GEMM) shared by the graph ops.

use crate::scalar::{matmul, Scalar};
use crate::tensor::{Shape, Tensor};

/// Geometry of a square-kernel convolution with symmetric zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// "Same" geometry: output is `ceil(h / stride) × ceil(w / stride)`.
    pub fn same(input: Shape, k: usize, stride: usize) -> Self {
        let pad = k / 2;
        ConvGeom {
            c_in: input.c,
            h: input.h,
            w: input.w,
            k,
            stride,
            pad,
            ho: (input.h + 2 * pad - k) / stride + 1,
            wo: (input.w + 2 * pad - k) / stride + 1,
        }
    }

    pub fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Range of output columns `ox` whose tap `kx` lands inside the input.
    #[inline]
    fn valid_out_range(&self, kx: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        // ix = ox*s + kx - pad must be in [0, n_in)
        let s = self.stride;
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(s) };
        let hi_excl = if n_in + self.pad > kx {
            ((n_in + self.pad - kx - 1) / s + 1).min(n_out)
        } else {
            0
        };
        (lo.min(hi_excl), hi_excl)
    }
}

/// Unfold `x` into a `(c·k·k) × (ho·wo)` matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let n = g.cols();
    let mut cols = vec![T::zero(); g.rows() * n];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy0, oy1) = g.valid_out_range(ky, g.h, g.ho);
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                let (ox0, ox1) = g.valid_out_range(kx, g.w, g.wo);
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if ox0 == ox1 {
                        continue;
                    } else if g.stride == 1 {
                        let ix0 = ox0 + kx - g.pad;
                        drow[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            drow[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into `dx`.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let n = g.cols();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy0, oy1) = g.valid_out_range(ky, g.h, g.ho);
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                let (ox0, ox1) = g.valid_out_range(kx, g.w, g.wo);
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let drow = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                    for ox in ox0..ox1 {
                        drow[ox * g.stride + kx - g.pad] += srow[ox];
                    }
                }
            }
        }
    }
}

/// `y = W * x (+ b)` with weights laid out `[c_out, c_in, k, k]`.
pub(crate) fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    bias: Option<&[T]>,
    c_out: usize,
    g: &ConvGeom,
) -> Tensor<T> {
    let n = g.cols();
    let mut out = vec![T::zero(); c_out * n];
    if g.k == 1 && g.stride == 1 {
        matmul(c_out, g.rows(), n, weight, false, x.data(), false, &mut out, false);
    } else {
        let cols = im2col(x.data(), g);
        matmul(c_out, g.rows(), n, weight, false, &cols, false, &mut out, false);
    }
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_exact_mut(n).enumerate() {
            let bv = b[co];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    Tensor::from_vec(Shape::new(c_out, g.ho, g.wo), out).expect("conv output size")
}

/// Gradients of [`conv_forward`]. Accumulates into `dw`/`db`; returns the
/// input gradient only when `want_dx`.
pub(crate) fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    dout: &[T],
    c_out: usize,
    g: &ConvGeom,
    dw: &mut [T],
    db: Option<&mut [T]>,
    want_dx: bool,
) -> Option<Vec<T>> {
    let n = g.cols();
    if let Some(db) = db {
        for (co, chunk) in dout.chunks_exact(n).enumerate() {
            db[co] += chunk.iter().copied().sum::<T>();
        }
    }
    let direct = g.k == 1 && g.stride == 1;
    let cols_owned;
    let cols: &[T] = if direct {
        x.data()
    } else {
        cols_owned = im2col(x.data(), g);
        &cols_owned
    };
    // dW (c_out × rows) += dout (c_out × n) · colsᵀ (n × rows)
    matmul(c_out, n, g.rows(), dout, false, cols, true, dw, true);
    if !want_dx {
        return None;
    }
    // dcols (rows × n) = Wᵀ (rows × c_out) · dout (c_out × n)
    let mut dcols = vec![T::zero(); g.rows() * n];
    matmul(g.rows(), c_out, n, weight, true, dout, false, &mut dcols, false);
    if direct {
        return Some(dcols);
    }
    let mut dx = vec![T::zero(); g.c_in * g.h * g.w];
    col2im(&dcols, g, &mut dx);
    Some(dx)
}

/// Geometry of the stride-2, 3×3 transposed convolution that maps `h × w`
/// onto `2h × 2w`. It is the adjoint of the "same" stride-2 convolution on a
/// `2h × 2w` input with `c_out` channels.
pub(crate) fn transpose_geom(c_out: usize, h: usize, w: usize) -> ConvGeom {
    ConvGeom::same(Shape::new(c_out, 2 * h, 2 * w), 3, 2)
}

/// Transposed convolution, weights laid out `[c_in, c_out, 3, 3]`.
pub(crate) fn conv_transpose_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    bias: Option<&[T]>,
    c_out: usize,
) -> Tensor<T> {
    let s = x.shape();
    let g = transpose_geom(c_out, s.h, s.w);
    debug_assert_eq!((g.ho, g.wo), (s.h, s.w));
    let n = g.cols();
    // cols (c_out·9 × n) = Wᵀ · x, with W viewed as (c_in × c_out·9)
    let mut cols = vec![T::zero(); g.rows() * n];
    matmul(g.rows(), s.c, n, weight, true, x.data(), false, &mut cols, false);
    let mut out = vec![T::zero(); c_out * g.h * g.w];
    col2im(&cols, &g, &mut out);
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_exact_mut(g.h * g.w).enumerate() {
            let bv = b[co];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    Tensor::from_vec(Shape::new(c_out, g.h, g.w), out).expect("transpose output size")
}

pub(crate) fn conv_transpose_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    dout: &Tensor<T>,
    dw: &mut [T],
    db: Option<&mut [T]>,
    want_dx: bool,
) -> Option<Vec<T>> {
    let s = x.shape();
    let c_out = dout.shape().c;
    let g = transpose_geom(c_out, s.h, s.w);
    let n = g.cols();
    if let Some(db) = db {
        for (co, chunk) in dout.data().chunks_exact(g.h * g.w).enumerate() {
            db[co] += chunk.iter().copied().sum::<T>();
        }
    }
    let dcols = im2col(dout.data(), &g);
    // dW (c_in × c_out·9) += x (c_in × n) · dcolsᵀ
    matmul(s.c, n, g.rows(), x.data(), false, &dcols, true, dw, true);
    if !want_dx {
        return None;
    }
    let mut dx = vec![T::zero(); s.c * n];
    matmul(s.c, g.rows(), n, weight, false, &dcols, false, &mut dx, false);
    Some(dx)
}
