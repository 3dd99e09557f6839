//! The two-codec interpolation network.
//!
//! A dense RGB encoder-decoder produces image features at every pyramid
//! level. Affinity blocks branch off its decoder and steer the guided
//! propagation modules of a sparse encoder-decoder, which carries validity
//! masks from the sparse input to a dense output. An optional refinement
//! stage smooths the result with stabilized image-driven kernels.

mod config;

pub use config::{Guidance, ModelConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Activation, Conv2d, ConvTranspose2d};
use crate::param::{InitMode, ParamStore};
use crate::propagation::{sparse_conv_flops, AffinityBlock, RefinementHead, SsgpModule};
use crate::scalar::Scalar;
use crate::sparse::{MaskedFeature, MaskedVar};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
struct RgbDown {
    convs: [Conv2d; 4],
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct RgbUp {
    conv: Conv2d,
    up: ConvTranspose2d,
    merge: [Conv2d; 2],
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct RgbCodec {
    pre: Conv2d,
    down: Vec<RgbDown>,
    bottleneck: Conv2d,
    /// `up[i]` takes level `i + 1` to level `i`.
    up: Vec<RgbUp>,
}

/// Guided propagation, or the plain sparse 3×3 convolution that replaces it
/// on unguided sides.
#[derive(Clone, Debug, PartialEq, Eq)]
enum Spread {
    Guided { block: AffinityBlock, ssgp: SsgpModule },
    Plain(Conv2d),
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct SparseUp {
    spread: Spread,
    merge: Conv2d,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct SparseCodec {
    pre: Conv2d,
    /// `down[i]` runs at level `i` and feeds level `i + 1`.
    down: Vec<Spread>,
    bottleneck: Conv2d,
    /// `up[i]` runs at level `i + 1` and merges into level `i`.
    up: Vec<SparseUp>,
    final_spread: Spread,
    head: [Conv2d; 3],
}

/// Layer layout of a model; the weights live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    config: ModelConfig,
    rgb: Option<RgbCodec>,
    sparse: SparseCodec,
    refine: Option<RefinementHead>,
}

/// A built model: configuration, layer layout and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub arch: Architecture,
    pub params: ParamStore<T>,
}

/// Network output, cropped to the input size, in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput<T: Scalar = f32> {
    pub dense: Tensor<T>,
    pub pre_refine: Tensor<T>,
    pub final_mask: Tensor<T>,
}

/// Graph handles of one recorded forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars<T: Scalar = f32> {
    pub dense: Var,
    pub pre_refine: Var,
    pub final_mask: Tensor<T>,
    /// Masks after each sparse encoder level, full resolution first.
    pub encoder_masks: Vec<Tensor<T>>,
}

struct Builder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Conv2d> {
        Conv2d::new(self.store, &mut self.rng, name, c_in, c_out, k, stride, InitMode::ReluScaled)
    }

    fn sparse_conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<Conv2d> {
        Conv2d::new(self.store, &mut self.rng, name, c_in, c_out, k, 1, InitMode::MaskNormalized)
    }

    fn spread(&mut self, name: &str, guided: bool, cfg: &ModelConfig, feat: usize, c_in: usize, c_out: usize) -> Result<Spread> {
        if !guided {
            return Ok(Spread::Plain(self.sparse_conv(&format!("{name}.conv"), c_in, c_out, 3)?));
        }
        let per_channel = (!cfg.flat_affinity).then_some(c_in);
        let block = AffinityBlock::new(self.store, &mut self.rng, &format!("{name}.affinity"), feat, cfg.kernel, per_channel)?;
        let ssgp = SsgpModule::new(self.store, &mut self.rng, name, c_in, c_out, cfg.kernel, !cfg.flat_affinity)?;
        Ok(Spread::Guided { block, ssgp })
    }
}

/// Construct a model with parameters drawn from `seed`.
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let cfg = config.clone();
    let ch = &cfg.channels;
    let l = cfg.levels;
    let mut store = ParamStore::new();
    let mut b = Builder {
        store: &mut store,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };

    let rgb = if cfg.guidance == Guidance::None {
        None
    } else {
        let pre = b.conv("rgb.pre", 3, ch[0], 1, 1)?;
        let mut down = Vec::with_capacity(l);
        for i in 1..=l {
            let n = format!("rgb.down{i}");
            down.push(RgbDown {
                convs: [
                    b.conv(&format!("{n}.conv1"), ch[i - 1], ch[i], 3, 1)?,
                    b.conv(&format!("{n}.conv2"), ch[i], ch[i], 3, 1)?,
                    b.conv(&format!("{n}.conv3"), ch[i], ch[i], 3, 2)?,
                    b.conv(&format!("{n}.conv4"), ch[i], ch[i], 3, 1)?,
                ],
            });
        }
        let bottleneck = b.conv("rgb.bottleneck", ch[l], ch[l], 3, 1)?;
        let mut up = Vec::with_capacity(l);
        for i in 1..=l {
            let n = format!("rgb.up{i}");
            up.push(RgbUp {
                conv: b.conv(&format!("{n}.conv1"), ch[i], ch[i], 3, 1)?,
                up: ConvTranspose2d::new(b.store, &mut b.rng, &format!("{n}.up"), ch[i], ch[i - 1], InitMode::ReluScaled)?,
                merge: [
                    b.conv(&format!("{n}.conv3"), 2 * ch[i - 1], ch[i - 1], 3, 1)?,
                    b.conv(&format!("{n}.conv4"), ch[i - 1], ch[i - 1], 3, 1)?,
                ],
            });
        }
        Some(RgbCodec {
            pre,
            down,
            bottleneck,
            up,
        })
    };

    let pre = b.sparse_conv("sparse.pre", cfg.out_channels, ch[0], 1)?;
    let mut down = Vec::with_capacity(l);
    for i in 1..=l {
        down.push(b.spread(&format!("sparse.down{i}"), cfg.guidance.encoder(), &cfg, ch[i - 1], ch[i - 1], ch[i])?);
    }
    let bottleneck = b.sparse_conv("sparse.bottleneck", ch[l], ch[l], 3)?;
    let mut up = Vec::with_capacity(l);
    for i in 1..=l {
        let n = format!("sparse.up{i}");
        up.push(SparseUp {
            spread: b.spread(&n, cfg.guidance.decoder(), &cfg, ch[i], ch[i], ch[i - 1])?,
            merge: b.sparse_conv(&format!("{n}.merge"), ch[i - 1], ch[i - 1], 3)?,
        });
    }
    let final_spread = b.spread("sparse.final", cfg.guidance.decoder(), &cfg, ch[0], ch[0], ch[0])?;
    let head = [
        b.sparse_conv("sparse.head1", ch[0], ch[0], 3)?,
        b.sparse_conv("sparse.head2", ch[0], ch[0], 3)?,
        b.sparse_conv("sparse.head3", ch[0], cfg.out_channels, 1)?,
    ];
    let refine = if cfg.refine {
        Some(RefinementHead::new(
            b.store,
            &mut b.rng,
            "refine",
            ch[0],
            cfg.out_channels,
            cfg.kernel,
            cfg.refine_iterations,
        )?)
    } else {
        None
    };

    Ok(Model {
        arch: Architecture {
            config: cfg,
            rgb,
            sparse: SparseCodec {
                pre,
                down,
                bottleneck,
                up,
                final_spread,
                head,
            },
            refine,
        },
        params: store,
    })
}

impl Spread {
    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        input: &MaskedVar<T>,
        guide: Option<Var>,
    ) -> Result<MaskedVar<T>> {
        match (self, guide) {
            (Spread::Guided { block, ssgp }, Some(features)) => {
                let affinity = block.predict(g, params, features)?;
                ssgp.forward(g, params, input, affinity)
            }
            (Spread::Plain(conv), _) => g.sparse_conv2d(params, conv, input, Activation::Relu),
            (Spread::Guided { .. }, None) => Err(Error::Config("guided module without image features".into())),
        }
    }

    fn param_count(&self) -> usize {
        match self {
            Spread::Guided { block, ssgp } => block.param_count() + ssgp.param_count(),
            Spread::Plain(c) => c.param_count(),
        }
    }

    fn flops(&self, h: usize, w: usize) -> u64 {
        match self {
            Spread::Guided { block, ssgp } => block.flops(h, w) + ssgp.flops(h, w),
            Spread::Plain(c) => sparse_conv_flops(c, h, w),
        }
    }
}

impl RgbCodec {
    /// Decoder features per level, full resolution first.
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, params: &ParamStore<T>, image: Var) -> Result<Vec<Var>> {
        let relu = Activation::Relu;
        let mut x = g.conv2d(params, &self.pre, image, relu)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for d in &self.down {
            skips.push(x);
            for c in &d.convs {
                x = g.conv2d(params, c, x, relu)?;
            }
        }
        x = g.conv2d(params, &self.bottleneck, x, relu)?;
        let mut feats = vec![x];
        for (u, skip) in self.up.iter().zip(&skips).rev() {
            let s = g.shape(*skip);
            x = g.conv2d(params, &u.conv, x, relu)?;
            x = g.conv_transpose2d(params, &u.up, x, relu)?;
            x = g.crop(x, s.h, s.w)?;
            x = g.concat(x, *skip)?;
            x = g.conv2d(params, &u.merge[0], x, relu)?;
            x = g.conv2d(params, &u.merge[1], x, relu)?;
            feats.push(x);
        }
        feats.reverse();
        Ok(feats)
    }
}

/// Spatial size at each pyramid level for an `h × w` input.
fn level_sizes(h: usize, w: usize, levels: usize) -> Vec<(usize, usize)> {
    let mut v = vec![(h, w)];
    for _ in 0..levels {
        let (a, b) = *v.last().expect("non-empty");
        v.push((a.div_ceil(2), b.div_ceil(2)));
    }
    v
}

impl Architecture {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Record a forward pass. `image` is `[3, H, W]` and `sparse` holds
    /// `out_channels` channels over the same grid, both normalized.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        image: Var,
        sparse: &MaskedVar<T>,
    ) -> Result<ForwardVars<T>> {
        let cfg = &self.config;
        let is = g.shape(image);
        let ss = g.shape(sparse.features);
        if is.c != 3 {
            return Err(Error::shape("forward", format!("image {is} must have 3 channels")));
        }
        if (is.h, is.w) != (ss.h, ss.w) || sparse.mask.shape() != Shape::new(1, ss.h, ss.w) {
            return Err(Error::shape(
                "forward",
                format!("image {is}, sparse {ss}, mask {} are not aligned", sparse.mask.shape()),
            ));
        }
        if ss.c != cfg.out_channels {
            return Err(Error::shape(
                "forward",
                format!("sparse input has {} channels, model expects {}", ss.c, cfg.out_channels),
            ));
        }
        let (h, w) = (is.h, is.w);
        let m = cfg.stride_multiple();
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);

        let image = if (ph, pw) == (h, w) {
            image
        } else {
            let padded = g.value(image).pad_replicate(ph, pw)?;
            g.input(padded)
        };
        let mut input = if (ph, pw) == (h, w) {
            sparse.clone()
        } else {
            let mask = sparse.mask.pad_constant(ph, pw, T::zero())?;
            let f = g.value(sparse.features).pad_constant(ph, pw, T::zero())?;
            MaskedVar {
                features: g.input(f),
                mask,
            }
        };
        if !cfg.sparse_aware {
            let zeroed = g.mask_mul(input.features, &input.mask)?;
            input = MaskedVar {
                features: zeroed,
                mask: Tensor::ones(input.mask.shape()),
            };
        }
        let aware = cfg.sparse_aware;
        let unmask = |mv: MaskedVar<T>| -> MaskedVar<T> {
            if aware {
                mv
            } else {
                MaskedVar {
                    mask: Tensor::ones(mv.mask.shape()),
                    ..mv
                }
            }
        };

        let guide = match &self.rgb {
            Some(rgb) => Some(rgb.forward(g, params, image)?),
            None => None,
        };
        let guide_at = |lvl: usize| guide.as_ref().map(|f| f[lvl]);

        let sp = &self.sparse;
        let mut x = unmask(g.sparse_conv2d(params, &sp.pre, &input, Activation::Relu)?);
        let mut encoder_masks = vec![x.mask.clone()];
        let mut skips = Vec::with_capacity(cfg.levels);
        for (i, spread) in sp.down.iter().enumerate() {
            skips.push(x.clone());
            x = unmask(spread.forward(g, params, &x, guide_at(i))?);
            x = unmask(g.sparse_avg_pool(&x)?);
            encoder_masks.push(x.mask.clone());
        }
        x = unmask(g.sparse_conv2d(params, &sp.bottleneck, &x, Activation::Relu)?);
        for (i, (u, skip)) in sp.up.iter().zip(&skips).enumerate().rev() {
            let s = skip.mask.shape();
            x = unmask(u.spread.forward(g, params, &x, guide_at(i + 1))?);
            x = g.nn_upsample(&x, s.h, s.w)?;
            x = unmask(g.sparse_skip_merge(params, &u.merge, &x, skip, Activation::Relu)?);
        }
        x = unmask(sp.final_spread.forward(g, params, &x, guide_at(0))?);
        x = unmask(g.sparse_conv2d(params, &sp.head[0], &x, Activation::Relu)?);
        x = unmask(g.sparse_conv2d(params, &sp.head[1], &x, Activation::Linear)?);
        x = unmask(g.sparse_conv2d(params, &sp.head[2], &x, Activation::Linear)?);

        let pre = x.features;
        let refined = match (&self.refine, &guide) {
            (Some(head), Some(f)) => head.forward(g, params, pre, f[0])?,
            _ => pre,
        };
        Ok(ForwardVars {
            dense: g.crop(refined, h, w)?,
            pre_refine: g.crop(pre, h, w)?,
            final_mask: x.mask.crop(h, w)?,
            encoder_masks,
        })
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        if let Some(rgb) = &self.rgb {
            n += rgb.pre.param_count() + rgb.bottleneck.param_count();
            for d in &rgb.down {
                n += d.convs.iter().map(Conv2d::param_count).sum::<usize>();
            }
            for u in &rgb.up {
                n += u.conv.param_count() + u.up.param_count();
                n += u.merge.iter().map(Conv2d::param_count).sum::<usize>();
            }
        }
        let sp = &self.sparse;
        n += sp.pre.param_count() + sp.bottleneck.param_count() + sp.final_spread.param_count();
        n += sp.down.iter().map(Spread::param_count).sum::<usize>();
        n += sp.up.iter().map(|u| u.spread.param_count() + u.merge.param_count()).sum::<usize>();
        n += sp.head.iter().map(Conv2d::param_count).sum::<usize>();
        n + self.refine.as_ref().map_or(0, RefinementHead::param_count)
    }

    /// Analytic FLOP count for an `h × w` input after padding.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let cfg = &self.config;
        let m = cfg.stride_multiple();
        let sizes = level_sizes(h.div_ceil(m) * m, w.div_ceil(m) * m, cfg.levels);
        let ch = &cfg.channels;
        let mut f = 0u64;
        if let Some(rgb) = &self.rgb {
            let (h0, w0) = sizes[0];
            f += rgb.pre.flops(h0, w0);
            for (i, d) in rgb.down.iter().enumerate() {
                let (a, b) = sizes[i];
                let (a2, b2) = sizes[i + 1];
                f += d.convs[0].flops(a, b) + d.convs[1].flops(a, b) + d.convs[2].flops(a, b);
                f += d.convs[3].flops(a2, b2);
            }
            let (hl, wl) = sizes[cfg.levels];
            f += rgb.bottleneck.flops(hl, wl);
            for (i, u) in rgb.up.iter().enumerate() {
                let (a, b) = sizes[i + 1];
                let (a0, b0) = sizes[i];
                f += u.conv.flops(a, b) + u.up.flops(a, b);
                f += u.merge[0].flops(a0, b0) + u.merge[1].flops(a0, b0);
            }
        }
        let sp = &self.sparse;
        let (h0, w0) = sizes[0];
        f += sparse_conv_flops(&sp.pre, h0, w0);
        for (i, d) in sp.down.iter().enumerate() {
            let (a, b) = sizes[i];
            let (a2, b2) = sizes[i + 1];
            f += d.flops(a, b);
            // window sums, mask counts and normalization
            let c = ch[i + 1] as u64;
            let px = (a2 * b2) as u64;
            f += 9 * c * px + 9 * px + c * px;
        }
        let (hl, wl) = sizes[cfg.levels];
        f += sparse_conv_flops(&sp.bottleneck, hl, wl);
        for (i, u) in sp.up.iter().enumerate() {
            let (a, b) = sizes[i + 1];
            let (a0, b0) = sizes[i];
            f += u.spread.flops(a, b);
            // masking both inputs, the sum and the mask union
            f += 3 * (ch[i] * a0 * b0) as u64 + (a0 * b0) as u64;
            f += sparse_conv_flops(&u.merge, a0, b0);
        }
        f += sp.final_spread.flops(h0, w0);
        f += sp.head.iter().map(|c| sparse_conv_flops(c, h0, w0)).sum::<u64>();
        f + self.refine.as_ref().map_or(0, |r| r.flops(h0, w0))
    }
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    /// Inference without gradient bookkeeping beyond the tape.
    pub fn forward(&self, image: &Tensor<T>, sparse: &MaskedFeature<T>) -> Result<ModelOutput<T>> {
        let mut g = Graph::new();
        let img = g.input(image.clone());
        let sp = g.masked_input(sparse);
        let out = self.arch.forward(&mut g, &self.params, img, &sp)?;
        let dense = g.value(out.dense).clone();
        if !dense.is_finite() {
            return Err(Error::NonFinite("model output".into()));
        }
        Ok(ModelOutput {
            dense,
            pre_refine: g.value(out.pre_refine).clone(),
            final_mask: out.final_mask,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }
}

/// Exact number of trainable scalars.
pub fn count_params<T: Scalar>(model: &Model<T>) -> usize {
    model.params.scalar_count()
}

/// Analytic FLOPs of one forward pass at `height × width`: two per
/// multiply-accumulate, one per mask or normalization element.
pub fn count_flops<T: Scalar>(model: &Model<T>, height: usize, width: usize) -> u64 {
    model.arch.flops(height, width)
}

/// Accounting from the configuration alone, without drawing weights.
pub fn accounting(config: &ModelConfig, height: usize, width: usize) -> Result<(usize, u64)> {
    let model = build_model::<f32>(config, 0)?;
    Ok((model.arch.param_count(), model.arch.flops(height, width)))
}
