//! Convolution layer descriptors. A layer only stores handles into the
//! [`ParamStore`]; graphs read the weights when ops are recorded.

use rand::Rng;

use crate::error::{Error, Result};
use crate::param::{init_weights, InitMode, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Shape;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

/// Square convolution with bias, weights `[c_out, c_in, k, k]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        init: InitMode,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) || kernel == 0 {
            return Err(Error::Config(format!("{name}: kernel size {kernel} must be odd")));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::Config(format!("{name}: stride {stride} not in {{1, 2}}")));
        }
        if c_in == 0 || c_out == 0 {
            return Err(Error::Config(format!("{name}: zero channels")));
        }
        let fan_in = c_in * kernel * kernel;
        let weight = store.push(init_weights(
            format!("{name}.weight"),
            vec![c_out, c_in, kernel, kernel],
            fan_in,
            init,
            rng,
        )?);
        let bias = store.push(init_weights(
            format!("{name}.bias"),
            vec![c_out],
            fan_in,
            InitMode::Zeros,
            rng,
        )?);
        Ok(Conv2d {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
            stride,
        })
    }

    pub(crate) fn check_input(&self, s: Shape) -> Result<()> {
        if s.c != self.c_in {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input has {} channels ({}), weights expect c_in = {}",
                    s.c, s, self.c_in
                ),
            ));
        }
        if s.h == 0 || s.w == 0 {
            return Err(Error::shape("conv2d", format!("empty input {s}")));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel + self.c_out
    }

    /// FLOPs for an `h × w` input: two per multiply-accumulate plus one bias
    /// add per output element.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = (h.div_ceil(self.stride), w.div_ceil(self.stride));
        let outs = (self.c_out * ho * wo) as u64;
        2 * outs * (self.c_in * self.kernel * self.kernel) as u64 + outs
    }
}

/// Stride-2 3×3 transposed convolution, weights `[c_in, c_out, 3, 3]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvTranspose2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        init: InitMode,
    ) -> Result<Self> {
        if c_in == 0 || c_out == 0 {
            return Err(Error::Config(format!("{name}: zero channels")));
        }
        // each output pixel receives on average 9/4 taps per input channel
        let fan_in = (c_in * 9).div_ceil(4);
        let weight = store.push(init_weights(
            format!("{name}.weight"),
            vec![c_in, c_out, 3, 3],
            fan_in,
            init,
            rng,
        )?);
        let bias = store.push(init_weights(
            format!("{name}.bias"),
            vec![c_out],
            fan_in,
            InitMode::Zeros,
            rng,
        )?);
        Ok(ConvTranspose2d {
            weight,
            bias,
            c_in,
            c_out,
        })
    }

    pub fn param_count(&self) -> usize {
        self.c_in * self.c_out * 9 + self.c_out
    }

    /// FLOPs for an `h × w` input producing `2h × 2w`.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let macs = (self.c_in * self.c_out * 9 * h * w) as u64;
        2 * macs + (self.c_out * 4 * h * w) as u64
    }
}
