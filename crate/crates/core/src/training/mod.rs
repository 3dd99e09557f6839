//! Losses, the learning-rate schedule and the training loop.

pub mod loss;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::{self, KeyValue};
use crate::data::{
    add_noise, normalize, photometric_augment, sparsify, synth_scene, AugmentRanges, NoiseKind, Pattern, Sample,
    SceneParams, Task,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::network::{build_model, Model, ModelConfig};
use crate::param::{adam_step, AdamConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub initial_lr: f64,
    pub decay_rate: f64,
    pub decay_every_fraction: f64,
    pub task: Task,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub augment: bool,
}

impl TrainConfig {
    pub fn new(task: Task, total_steps: usize) -> Self {
        TrainConfig {
            total_steps,
            initial_lr: 1e-4,
            decay_rate: 0.8,
            decay_every_fraction: 0.1,
            task,
            seed: 0,
            checkpoint_every: 0,
            augment: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::Config(format!("decay_rate {} outside (0, 1]", self.decay_rate)));
        }
        if !(self.decay_every_fraction > 0.0 && self.decay_every_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "decay_every {} outside (0, 1]",
                self.decay_every_fraction
            )));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.initial_lr)));
        }
        Ok(())
    }
}

impl KeyValue for TrainConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "steps" => self.total_steps = config::value(key, v)?,
            "lr" => self.initial_lr = config::value(key, v)?,
            "decay_rate" => self.decay_rate = config::value(key, v)?,
            "decay_every" => self.decay_every_fraction = config::value(key, v)?,
            "checkpoint_every" => self.checkpoint_every = config::value(key, v)?,
            "augment" => self.augment = config::flag(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("steps", self.total_steps.to_string()),
            ("lr", self.initial_lr.to_string()),
            ("decay_rate", self.decay_rate.to_string()),
            ("decay_every", self.decay_every_fraction.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("augment", self.augment.to_string()),
        ]
    }
}

/// Staircase decay: `initial_lr · decay_rate^⌊step / (fraction · total)⌋`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let period = (cfg.decay_every_fraction * cfg.total_steps as f64).max(1.0);
    let k = (step as f64 / period).floor();
    cfg.initial_lr * cfg.decay_rate.powf(k)
}

/// A stream of training samples indexed by step.
pub trait SampleSource {
    fn task(&self) -> Task;
    /// Must be a pure function of the source's settings and `step`.
    fn draw(&mut self, step: usize) -> Result<Sample>;
}

/// How sparse inputs are derived from dense ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sparsification {
    pub pattern: Pattern,
    pub density: f64,
    pub noise: Option<(NoiseKind, f64)>,
}

impl Sparsification {
    pub fn uniform(density: f64) -> Self {
        Sparsification {
            pattern: Pattern::Uniform,
            density,
            noise: None,
        }
    }

    pub fn with_noise(self, kind: NoiseKind, scale: f64) -> Self {
        Sparsification {
            noise: Some((kind, scale)),
            ..self
        }
    }

    /// Thin (and optionally perturb) the ground truth of `sample`.
    pub fn apply(&self, sample: &Sample, seed: u64) -> Result<Sample> {
        let mut sparse = sparsify(&sample.gt, &sample.gt_mask, self.pattern, self.density, seed)?;
        if let Some((kind, scale)) = self.noise {
            sparse = add_noise(&sparse, kind, scale, seed ^ 0x9e37_79b9_7f4a_7c15)?;
        }
        Ok(Sample {
            sparse,
            ..sample.clone()
        })
    }
}

/// Mix a base seed with an index into an independent stream seed.
pub fn stream_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Synthetic scenes, freshly sparsified on every draw. With `pool` set the
/// scenes cycle through a fixed set of that size.
#[derive(Clone, Debug)]
pub struct SyntheticSource {
    pub scene: SceneParams,
    pub sparsification: Sparsification,
    pub pool: Option<usize>,
    pub seed: u64,
}

impl SampleSource for SyntheticSource {
    fn task(&self) -> Task {
        self.scene.task
    }

    fn draw(&mut self, step: usize) -> Result<Sample> {
        let scene_index = match self.pool {
            Some(n) if n > 0 => (step % n) as u64,
            _ => step as u64,
        };
        let scene = synth_scene(stream_seed(self.seed, scene_index), &self.scene)?;
        self.sparsification
            .apply(&scene, stream_seed(self.seed ^ 0x5151, step as u64))
    }
}

/// Samples loaded into memory, visited in order. A sparsification, when
/// set, replaces the stored sparse input with a fresh draw from the ground
/// truth.
#[derive(Clone, Debug)]
pub struct MemorySource {
    pub samples: Vec<Sample>,
    pub resparsify: Option<Sparsification>,
    pub seed: u64,
}

impl SampleSource for MemorySource {
    fn task(&self) -> Task {
        self.samples.first().map_or(Task::OpticalFlow, |s| s.task)
    }

    fn draw(&mut self, step: usize) -> Result<Sample> {
        if self.samples.is_empty() {
            return Err(Error::Config("no training samples".into()));
        }
        let s = &self.samples[step % self.samples.len()];
        match &self.resparsify {
            Some(sp) => sp.apply(s, stream_seed(self.seed, step as u64)),
            None => Ok(s.clone()),
        }
    }
}

/// Per-step training record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<(usize, f64, f64)>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,loss\n");
        for (step, lr, loss) in &self.entries {
            let _ = writeln!(s, "{step},{lr:e},{loss:e}");
        }
        s
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.entries.last().map(|e| e.2)
    }
}

/// Task loss of the model on one sample, in normalized target space.
pub fn sample_loss(model: &Model, sample: &Sample) -> Result<f64> {
    let (n, _) = normalize(sample)?;
    let mut g = Graph::new();
    let img = g.input(n.image.clone());
    let sp = g.masked_input(&n.sparse);
    let out = model.arch.forward(&mut g, &model.params, img, &sp)?;
    let l = task_loss(&mut g, sample.task, out.dense, &n)?;
    Ok(g.value(l).data()[0] as f64)
}

fn task_loss(g: &mut Graph, task: Task, pred: crate::graph::Var, n: &Sample) -> Result<crate::graph::Var> {
    if task.is_motion() {
        g.loss_epe(pred, &n.gt, &n.gt_mask)
    } else {
        g.loss_mse(pred, &n.gt, &n.gt_mask)
    }
}

/// Train in place. Checkpoints and the loss log go under `out_dir` when it
/// is given; a non-finite loss or gradient aborts with an error and leaves
/// the last written checkpoint untouched.
pub fn train(model: &mut Model, source: &mut dyn SampleSource, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainLog> {
    cfg.validate()?;
    if source.task() != cfg.task {
        return Err(Error::Config(format!("source provides {}, training {}", source.task(), cfg.task)));
    }
    if model.config().out_channels != cfg.task.channels() {
        return Err(Error::Config(format!(
            "model emits {} channels, task {} needs {}",
            model.config().out_channels,
            cfg.task,
            cfg.task.channels()
        )));
    }
    let mut log = TrainLog::default();
    let adam = AdamConfig::default();
    let ranges = AugmentRanges::default();
    for step in 0..cfg.total_steps {
        let mut sample = source.draw(step)?;
        if cfg.augment {
            sample.image = photometric_augment(&sample.image, &ranges, stream_seed(cfg.seed ^ 0xa5a5, step as u64))?;
        }
        let (n, _) = normalize(&sample)?;
        let mut g = Graph::new();
        let img = g.input(n.image.clone());
        let sp = g.masked_input(&n.sparse);
        let out = model.arch.forward(&mut g, &model.params, img, &sp)?;
        let l = task_loss(&mut g, cfg.task, out.dense, &n)?;
        let loss = g.value(l).data()[0] as f64;
        let lr = lr_at(step, cfg);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        log.entries.push((step, lr, loss));
        g.backward(l, &mut model.params)?;
        adam_step(&mut model.params, lr, adam)?;

        let done = step + 1;
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.total_steps {
                save_model(&dir.join(format!("step-{done:07}")), model)?;
                write_log(dir, &log)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_model(&dir.join("final"), model)?;
        write_log(dir, &log)?;
    }
    Ok(log)
}

fn write_log(dir: &Path, log: &TrainLog) -> Result<()> {
    let p = dir.join("loss.csv");
    std::fs::write(&p, log.to_csv()).map_err(|e| Error::io(&p, e))
}

/// Checkpoint directory files.
pub fn checkpoint_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("params.ckpt"), dir.join("model.cfg"))
}

pub fn save_model(dir: &Path, model: &Model) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (params, cfg) = checkpoint_paths(dir);
    std::fs::write(&cfg, model.config().to_text()).map_err(|e| Error::io(&cfg, e))?;
    checkpoint::save(&model.params, &params)
}

/// Rebuild a model from a checkpoint directory. Optimizer moments are kept
/// unless `reset_optimizer` is set.
pub fn load_model(dir: &Path, reset_optimizer: bool) -> Result<Model> {
    let (params, cfg) = checkpoint_paths(dir);
    let text = std::fs::read_to_string(&cfg).map_err(|e| Error::io(&cfg, e))?;
    let config = ModelConfig::from_text(&text)?;
    let mut model = build_model(&config, 0)?;
    let stored = checkpoint::load(&params)?;
    checkpoint::restore_into(&mut model.params, &stored, !reset_optimizer)?;
    Ok(model)
}
