//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends one node holding its output value; `backward` walks the
//! tape in reverse recording order and visits each node once. Parameters live
//! outside the tape in a [`ParamStore`] and receive their gradients there.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::layers::{Activation, Conv2d, ConvTranspose2d};
use crate::param::{ParamId, ParamStore};
use crate::propagation;
use crate::scalar::Scalar;
use crate::sparse;
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op<T> {
    Input,
    Leaf,
    Conv {
        x: Var,
        weight: ParamId,
        bias: ParamId,
        geom: ConvGeom,
        c_out: usize,
    },
    ConvTranspose {
        x: Var,
        weight: ParamId,
        bias: ParamId,
    },
    Relu(Var),
    Add(Var, Var),
    Concat(Var, Var),
    Crop(Var),
    MaskMul {
        x: Var,
        mask: Tensor<T>,
    },
    SparseConv {
        x: Var,
        weight: ParamId,
        bias: ParamId,
        geom: ConvGeom,
        c_out: usize,
        mask: Tensor<T>,
        inv_count: Vec<T>,
    },
    SparsePool {
        x: Var,
        geom: ConvGeom,
        mask: Tensor<T>,
        inv_count: Vec<T>,
    },
    Upsample(Var),
    Propagate {
        x: Var,
        affinity: Var,
        mask: Tensor<T>,
        k: usize,
        per_channel: bool,
        inv_count: Vec<T>,
    },
    Stabilize {
        raw: Var,
        k: usize,
    },
    CspnStep {
        x: Var,
        weights: Var,
        k: usize,
    },
    Epe {
        pred: Var,
        gt: Tensor<T>,
        mask: Tensor<T>,
        count: usize,
    },
    Mse {
        pred: Var,
        gt: Tensor<T>,
        mask: Tensor<T>,
        count: usize,
    },
    WeightedSum {
        x: Var,
        weights: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of [`Graph::backward`]: gradient of the root w.r.t. each node.
pub struct Gradients<T> {
    vars: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.vars.get(v.0).and_then(|g| g.as_ref())
    }
}

pub(crate) const EPE_SMOOTHING: f64 = 1e-9;

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a} vs {b}")));
    }
    Ok(())
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Input whose gradient is tracked and reported by `backward`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// "Same"-padded convolution followed by the requested activation.
    pub fn conv2d(
        &mut self,
        params: &ParamStore<T>,
        layer: &Conv2d,
        x: Var,
        act: Activation,
    ) -> Result<Var> {
        let s = self.shape(x);
        layer.check_input(s)?;
        let geom = ConvGeom::same(s, layer.kernel, layer.stride);
        let out = kernels::conv_forward(
            self.value(x),
            &params.get(layer.weight).value,
            Some(&params.get(layer.bias).value),
            layer.c_out,
            &geom,
        );
        let y = self.push(
            out,
            Op::Conv {
                x,
                weight: layer.weight,
                bias: layer.bias,
                geom,
                c_out: layer.c_out,
            },
            true,
        );
        Ok(self.activate(y, act))
    }

    /// Stride-2 3×3 transposed convolution doubling the spatial size.
    pub fn conv_transpose2d(
        &mut self,
        params: &ParamStore<T>,
        layer: &ConvTranspose2d,
        x: Var,
        act: Activation,
    ) -> Result<Var> {
        let s = self.shape(x);
        if s.h == 0 || s.w == 0 {
            return Err(Error::shape("conv_transpose2d", format!("empty input {s}")));
        }
        if s.c != layer.c_in {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input has {} channels, weights expect {}", s.c, layer.c_in),
            ));
        }
        let out = kernels::conv_transpose_forward(
            self.value(x),
            &params.get(layer.weight).value,
            Some(&params.get(layer.bias).value),
            layer.c_out,
        );
        let y = self.push(
            out,
            Op::ConvTranspose {
                x,
                weight: layer.weight,
                bias: layer.bias,
            },
            true,
        );
        Ok(self.activate(y, act))
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Var {
        match act {
            Activation::Relu => self.relu(x),
            Activation::Linear => x,
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.needs(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let mut out = self.value(a).clone();
        add_into(out.data_mut(), self.value(b).data());
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).concat(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    /// Keep the top-left `h × w` window.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x);
        if (s.h, s.w) == (h, w) {
            return Ok(x);
        }
        let out = self.value(x).crop(h, w)?;
        let rg = self.needs(x);
        Ok(self.push(out, Op::Crop(x), rg))
    }

    /// Multiply every channel by a constant single-channel mask.
    pub fn mask_mul(&mut self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        let s = self.shape(x);
        if mask.shape() != Shape::new(1, s.h, s.w) {
            return Err(Error::shape("mask_mul", format!("mask {} for {s}", mask.shape())));
        }
        let mut out = self.value(x).clone();
        let m = mask.data();
        for chunk in out.data_mut().chunks_exact_mut(s.plane()) {
            chunk.iter_mut().zip(m).for_each(|(v, &mv)| *v *= mv);
        }
        let rg = self.needs(x);
        Ok(self.push(
            out,
            Op::MaskMul {
                x,
                mask: mask.clone(),
            },
            rg,
        ))
    }

    /// Mean Euclidean distance between `pred` and `gt` over valid pixels.
    pub fn loss_epe(&mut self, pred: Var, gt: &Tensor<T>, mask: &Tensor<T>) -> Result<Var> {
        let (value, count) = crate::training::loss::epe_value(self.value(pred), gt, mask)?;
        let rg = self.needs(pred);
        Ok(self.push(
            Tensor::full(Shape::new(1, 1, 1), T::from_f64_lossy(value)),
            Op::Epe {
                pred,
                gt: gt.clone(),
                mask: mask.clone(),
                count,
            },
            rg,
        ))
    }

    /// Mean squared residual over valid pixels.
    pub fn loss_mse(&mut self, pred: Var, gt: &Tensor<T>, mask: &Tensor<T>) -> Result<Var> {
        let (value, count) = crate::training::loss::mse_value(self.value(pred), gt, mask)?;
        let rg = self.needs(pred);
        Ok(self.push(
            Tensor::full(Shape::new(1, 1, 1), T::from_f64_lossy(value)),
            Op::Mse {
                pred,
                gt: gt.clone(),
                mask: mask.clone(),
                count,
            },
            rg,
        ))
    }

    /// Scalar `Σ x·w`, used to project tensor outputs for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        same_shape("weighted_sum", self.shape(x), weights.shape())?;
        let v: T = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| *a * *b)
            .sum();
        let rg = self.needs(x);
        Ok(self.push(
            Tensor::full(Shape::new(1, 1, 1), v),
            Op::WeightedSum {
                x,
                weights: weights.clone(),
            },
            rg,
        ))
    }

    /// Reverse pass from `root`, seeded with ones. Parameter gradients are
    /// accumulated into `params`.
    pub fn backward(&self, root: Var, params: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.shape(root)));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if !gout.is_finite() {
                return Err(Error::NonFinite(format!("gradient at graph node {i}")));
            }
            self.backward_node(node, &gout, &mut grads, params);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gout);
            }
        }
        Ok(Gradients { vars: grads })
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => add_into(g.data_mut(), &data),
            slot @ None => {
                *slot = Some(Tensor::from_vec(self.shape(v), data).expect("gradient shape"));
            }
        }
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        gout: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        params: &mut ParamStore<T>,
    ) {
        match &node.op {
            Op::Input | Op::Leaf => {}
            Op::Conv {
                x,
                weight,
                bias,
                geom,
                c_out,
            } => {
                let w = params.get(*weight).value.clone();
                let mut db = std::mem::take(&mut params.get_mut(*bias).grad);
                let dx = kernels::conv_backward(
                    self.value(*x),
                    &w,
                    gout.data(),
                    *c_out,
                    geom,
                    &mut params.get_mut(*weight).grad,
                    Some(&mut db),
                    self.needs(*x),
                );
                params.get_mut(*bias).grad = db;
                if let Some(dx) = dx {
                    self.send(grads, *x, dx);
                }
            }
            Op::ConvTranspose { x, weight, bias } => {
                let w = params.get(*weight).value.clone();
                let mut db = std::mem::take(&mut params.get_mut(*bias).grad);
                let dx = kernels::conv_transpose_backward(
                    self.value(*x),
                    &w,
                    gout,
                    &mut params.get_mut(*weight).grad,
                    Some(&mut db),
                    self.needs(*x),
                );
                params.get_mut(*bias).grad = db;
                if let Some(dx) = dx {
                    self.send(grads, *x, dx);
                }
            }
            Op::Relu(x) => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gout.data())
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.send(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.send(grads, *a, gout.data().to_vec());
                self.send(grads, *b, gout.data().to_vec());
            }
            Op::Concat(a, b) => {
                let split = self.shape(*a).len();
                self.send(grads, *a, gout.data()[..split].to_vec());
                self.send(grads, *b, gout.data()[split..].to_vec());
            }
            Op::Crop(x) => {
                let s = self.shape(*x);
                let o = gout.shape();
                let mut dx = vec![T::zero(); s.len()];
                for c in 0..o.c {
                    for y in 0..o.h {
                        let src = &gout.data()[(c * o.h + y) * o.w..(c * o.h + y + 1) * o.w];
                        let at = (c * s.h + y) * s.w;
                        dx[at..at + o.w].copy_from_slice(src);
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::MaskMul { x, mask } => {
                let p = mask.data().len();
                let mut dx = gout.data().to_vec();
                for chunk in dx.chunks_exact_mut(p) {
                    chunk.iter_mut().zip(mask.data()).for_each(|(g, &m)| *g *= m);
                }
                self.send(grads, *x, dx);
            }
            Op::SparseConv {
                x,
                weight,
                bias,
                geom,
                c_out,
                mask,
                inv_count,
            } => {
                let w = params.get(*weight).value.clone();
                let mut db = std::mem::take(&mut params.get_mut(*bias).grad);
                let dx = sparse::sparse_conv_backward(
                    self.value(*x),
                    mask,
                    inv_count,
                    &w,
                    gout,
                    *c_out,
                    geom,
                    &mut params.get_mut(*weight).grad,
                    &mut db,
                    self.needs(*x),
                );
                params.get_mut(*bias).grad = db;
                if let Some(dx) = dx {
                    self.send(grads, *x, dx);
                }
            }
            Op::SparsePool {
                x,
                geom,
                mask,
                inv_count,
            } => {
                let dx = sparse::avg_pool_backward(self.shape(*x), mask, inv_count, gout, geom);
                self.send(grads, *x, dx);
            }
            Op::Upsample(x) => {
                let dx = sparse::upsample_backward(self.shape(*x), gout);
                self.send(grads, *x, dx);
            }
            Op::Propagate {
                x,
                affinity,
                mask,
                k,
                per_channel,
                inv_count,
            } => {
                let (dx, daff) = propagation::propagate_backward(
                    self.value(*x),
                    self.value(*affinity),
                    mask,
                    inv_count,
                    gout,
                    *k,
                    *per_channel,
                    self.needs(*x),
                    self.needs(*affinity),
                );
                if let Some(dx) = dx {
                    self.send(grads, *x, dx);
                }
                if let Some(da) = daff {
                    self.send(grads, *affinity, da);
                }
            }
            Op::Stabilize { raw, k } => {
                let d = propagation::stabilize_backward(self.value(*raw), gout, *k);
                self.send(grads, *raw, d);
            }
            Op::CspnStep { x, weights, k } => {
                let (dx, dw) =
                    propagation::cspn_step_backward(self.value(*x), self.value(*weights), gout, *k);
                self.send(grads, *x, dx);
                self.send(grads, *weights, dw);
            }
            Op::Epe {
                pred,
                gt,
                mask,
                count,
            } => {
                let g0 = gout.data()[0];
                let d = crate::training::loss::epe_grad(self.value(*pred), gt, mask, *count, g0);
                self.send(grads, *pred, d);
            }
            Op::Mse {
                pred,
                gt,
                mask,
                count,
            } => {
                let g0 = gout.data()[0];
                let d = crate::training::loss::mse_grad(self.value(*pred), gt, mask, *count, g0);
                self.send(grads, *pred, d);
            }
            Op::WeightedSum { x, weights } => {
                let g0 = gout.data()[0];
                let d = weights.data().iter().map(|&w| w * g0).collect();
                self.send(grads, *x, d);
            }
        }
    }
}
