//! Dense `[channels, height, width]` tensors.

use std::fmt;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Channel-major `[C, H, W]` extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn spatial(&self) -> (usize, usize) {
        (self.h, self.w)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

/// A dense single-sample feature map.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, ", {:?}", self.data)?;
        }
        write!(f, ")")
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(
                "tensor",
                format!("{shape} needs {} values, got {}", shape.len(), data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.c {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    data.push(f(c, y, x));
                }
            }
        }
        Tensor { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(c < self.shape.c && y < self.shape.h && x < self.shape.w);
        (c * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.shape.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64_lossy()).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Channels `range` as a new tensor.
    pub fn slice_channels(&self, range: Range<usize>) -> Result<Self> {
        if range.start > range.end || range.end > self.shape.c {
            return Err(Error::shape(
                "slice_channels",
                format!("range {range:?} outside {} channels", self.shape.c),
            ));
        }
        let p = self.shape.plane();
        Ok(Tensor {
            shape: Shape::new(range.len(), self.shape.h, self.shape.w),
            data: self.data[range.start * p..range.end * p].to_vec(),
        })
    }

    /// Channel-wise concatenation, `self` first.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.shape.spatial() != other.shape.spatial() {
            return Err(Error::shape(
                "concat",
                format!("spatial {} vs {}", self.shape, other.shape),
            ));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Tensor {
            shape: Shape::new(self.shape.c + other.shape.c, self.shape.h, self.shape.w),
            data,
        })
    }

    /// Top-left `h × w` window.
    pub fn crop(&self, h: usize, w: usize) -> Result<Self> {
        if h > self.shape.h || w > self.shape.w {
            return Err(Error::shape(
                "crop",
                format!("{h}x{w} larger than {}", self.shape),
            ));
        }
        Ok(Tensor::from_fn(Shape::new(self.shape.c, h, w), |c, y, x| {
            self.get(c, y, x)
        }))
    }

    /// Grow to `h × w` by repeating the last row/column.
    pub fn pad_replicate(&self, h: usize, w: usize) -> Result<Self> {
        if h < self.shape.h || w < self.shape.w || self.shape.is_empty() {
            return Err(Error::shape(
                "pad_replicate",
                format!("cannot pad {} to {h}x{w}", self.shape),
            ));
        }
        Ok(Tensor::from_fn(Shape::new(self.shape.c, h, w), |c, y, x| {
            self.get(c, y.min(self.shape.h - 1), x.min(self.shape.w - 1))
        }))
    }

    /// Grow to `h × w` with `fill` outside the original extent.
    pub fn pad_constant(&self, h: usize, w: usize, fill: T) -> Result<Self> {
        if h < self.shape.h || w < self.shape.w {
            return Err(Error::shape(
                "pad_constant",
                format!("cannot pad {} to {h}x{w}", self.shape),
            ));
        }
        Ok(Tensor::from_fn(Shape::new(self.shape.c, h, w), |c, y, x| {
            if y < self.shape.h && x < self.shape.w {
                self.get(c, y, x)
            } else {
                fill
            }
        }))
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.to_f64_lossy() * b.to_f64_lossy())
            .sum()
    }
}
