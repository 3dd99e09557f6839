//! Procedural scenes: random convex polygons over a textured background,
//! each region carrying its own affine target field.

use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Sample, Task};
use crate::error::{Error, Result};
use crate::sparse::MaskedFeature;
use crate::tensor::{Shape, Tensor};

/// Scene generator settings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub task: Task,
    pub objects: RangeInclusive<usize>,
}

impl SceneParams {
    pub fn new(height: usize, width: usize, task: Task) -> Self {
        SceneParams {
            height,
            width,
            task,
            objects: 2..=5,
        }
    }
}

struct Polygon {
    vertices: Vec<(f64, f64)>,
}

impl Polygon {
    fn random(rng: &mut ChaCha8Rng, h: f64, w: f64) -> Self {
        let n = rng.gen_range(3..=7);
        let r = rng.gen_range(0.12..0.3) * h.min(w);
        let cx = rng.gen_range(0.1..0.9) * w;
        let cy = rng.gen_range(0.1..0.9) * h;
        let mut angles: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        angles.sort_by(f64::total_cmp);
        Polygon {
            vertices: angles.iter().map(|a| (cx + r * a.cos(), cy + r * a.sin())).collect(),
        }
    }

    /// Points on a circle in angular order form a convex polygon, so a
    /// point is inside iff it lies left of every edge.
    fn contains(&self, x: f64, y: f64) -> bool {
        let n = self.vertices.len();
        (0..n).all(|i| {
            let (ax, ay) = self.vertices[i];
            let (bx, by) = self.vertices[(i + 1) % n];
            (bx - ax) * (y - ay) - (by - ay) * (x - ax) >= 0.0
        })
    }
}

/// `a + b·x + c·y` over centred, size-normalized coordinates.
#[derive(Clone, Copy)]
struct Affine([f64; 3]);

impl Affine {
    fn random(rng: &mut ChaCha8Rng, offset: (f64, f64), slope: f64) -> Self {
        Affine([
            rng.gen_range(offset.0..offset.1),
            rng.gen_range(-slope..slope),
            rng.gen_range(-slope..slope),
        ])
    }

    fn at(&self, xn: f64, yn: f64) -> f64 {
        self.0[0] + self.0[1] * xn + self.0[2] * yn
    }
}

struct Appearance {
    color: [f64; 3],
    freq: (f64, f64),
    phase: f64,
    amp: f64,
}

impl Appearance {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Appearance {
            color: [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)],
            freq: (rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8)),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            amp: rng.gen_range(0.03..0.1),
        }
    }

    fn shade(&self, c: usize, x: f64, y: f64) -> f64 {
        self.color[c] + self.amp * (self.freq.0 * x + self.freq.1 * y + self.phase + c as f64).sin()
    }
}

fn region_field(rng: &mut ChaCha8Rng, task: Task, background: bool) -> Vec<Affine> {
    // objects move faster than the background so boundaries carry motion
    // discontinuities
    let motion = if background { (-3.0, 3.0) } else { (-10.0, 10.0) };
    match task {
        Task::OpticalFlow => vec![Affine::random(rng, motion, 3.0), Affine::random(rng, motion, 3.0)],
        Task::SceneFlow => {
            let d0 = if background {
                Affine::random(rng, (4.0, 12.0), 2.0)
            } else {
                Affine::random(rng, (14.0, 40.0), 4.0)
            };
            let change = Affine::random(rng, (-2.0, 2.0), 0.5);
            let d1 = Affine([d0.0[0] + change.0[0], d0.0[1] + change.0[1], d0.0[2] + change.0[2]]);
            vec![d0, d1, Affine::random(rng, motion, 3.0), Affine::random(rng, motion, 3.0)]
        }
        Task::Depth => {
            // inverse depth of a plane is affine in image coordinates; keep
            // the offset well above the slope so the field stays positive
            if background {
                vec![Affine::random(rng, (1.0, 2.0), 0.4)]
            } else {
                vec![Affine::random(rng, (2.5, 6.0), 1.0)]
            }
        }
    }
}

/// Render a scene with `objects` polygons (count drawn from the range) and
/// its dense ground truth. The sparse input of the returned sample is the
/// full ground truth; use [`super::sparsify`] to thin it.
pub fn synth_scene(seed: u64, params: &SceneParams) -> Result<Sample> {
    let (h, w) = (params.height, params.width);
    if h < 32 || w < 32 {
        return Err(Error::Config(format!("synthetic scenes need at least 32x32, got {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, label) = draw_regions(&mut rng, params)?;
    let looks: Vec<Appearance> = (0..=n).map(|_| Appearance::random(&mut rng)).collect();
    let fields: Vec<Vec<Affine>> = (0..=n).map(|i| region_field(&mut rng, params.task, i == 0)).collect();

    let grain = rand_distr::Normal::new(0.0, 0.01).expect("valid std");
    let image = Tensor::from_fn(Shape::new(3, h, w), |c, y, x| {
        let v = looks[label[y * w + x]].shade(c, x as f64, y as f64) + rng.sample(grain);
        v.clamp(0.0, 1.0) as f32
    });
    let c = params.task.channels();
    let gt = Tensor::from_fn(Shape::new(c, h, w), |ch, y, x| {
        let (xn, yn) = normalized(x, y, h, w);
        fields[label[y * w + x]][ch].at(xn, yn) as f32
    });
    let full = Tensor::ones(Shape::new(1, h, w));
    Ok(Sample {
        image,
        sparse: MaskedFeature::new(gt.clone(), full.clone())?,
        gt,
        gt_mask: full,
        task: params.task,
    })
}

/// Pixel coordinates mapped to roughly `[-0.5, 0.5]`.
fn normalized(x: usize, y: usize, h: usize, w: usize) -> (f64, f64) {
    ((x as f64 + 0.5) / w as f64 - 0.5, (y as f64 + 0.5) / h as f64 - 0.5)
}

/// Polygon count and region index per pixel (0 is the background); later
/// polygons occlude earlier ones.
fn draw_regions(rng: &mut ChaCha8Rng, params: &SceneParams) -> Result<(usize, Vec<usize>)> {
    if params.objects.is_empty() {
        return Err(Error::Config("empty object count range".into()));
    }
    let (h, w) = (params.height, params.width);
    let n = rng.gen_range(params.objects.clone());
    let polys: Vec<Polygon> = (0..n).map(|_| Polygon::random(rng, h as f64, w as f64)).collect();
    let mut label = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            for (k, poly) in polys.iter().enumerate() {
                if poly.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    label[y * w + x] = k + 1;
                }
            }
        }
    }
    Ok((n, label))
}

/// Region index per pixel of the scene [`synth_scene`] draws for `seed`.
pub fn scene_regions(seed: u64, params: &SceneParams) -> Result<Vec<usize>> {
    draw_regions(&mut ChaCha8Rng::seed_from_u64(seed), params).map(|(_, l)| l)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let p = SceneParams::new(40, 48, Task::SceneFlow);
        assert_eq!(synth_scene(3, &p).unwrap(), synth_scene(3, &p).unwrap());
        assert_ne!(synth_scene(3, &p).unwrap().gt, synth_scene(4, &p).unwrap().gt);
    }

    #[test]
    fn no_objects_gives_one_affine_field() {
        let p = SceneParams {
            objects: 0..=0,
            ..SceneParams::new(32, 32, Task::OpticalFlow)
        };
        let s = synth_scene(1, &p).unwrap();
        for c in 0..2 {
            // second differences of an affine field vanish
            for y in 0..32 {
                for x in 1..31 {
                    let d = s.gt.get(c, y, x - 1) - 2.0 * s.gt.get(c, y, x) + s.gt.get(c, y, x + 1);
                    assert!(d.abs() < 1e-4);
                }
            }
        }
        assert!(scene_regions(1, &p).unwrap().iter().all(|&l| l == 0));
    }

    #[test]
    fn depth_is_positive_and_image_in_range() {
        for seed in 0..5 {
            let s = synth_scene(seed, &SceneParams::new(32, 40, Task::Depth)).unwrap();
            assert!(s.gt.data().iter().all(|&v| v > 0.0));
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(synth_scene(0, &SceneParams::new(16, 40, Task::Depth)).is_err());
    }
}
