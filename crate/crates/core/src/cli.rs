//! Command-line front end. Every subcommand resolves one flat key-value
//! configuration (file, then `--set` overrides, then flags) and writes it to
//! `<out>/resolved-config` so that the run can be repeated from it alone.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::config::{self, KeyValue};
use crate::data::dataset::{sample_id, Dataset};
use crate::data::formats::{read_map, read_pgm_mask, read_ppm, write_flo, write_map};
use crate::data::{synth_scene, NoiseKind, Pattern, Sample, SceneParams, Task};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, sweep_density, sweep_noise, sweep_to_csv, EvalOptions, NearestFill, Predictor};
use crate::network::{accounting, build_model, ModelConfig};
use crate::sparse::MaskedFeature;
use crate::training::{load_model, stream_seed, train, MemorySource, Sparsification, SyntheticSource, TrainConfig};

/// Name of the configuration snapshot written by every run.
pub const RESOLVED_CONFIG: &str = "resolved-config";
/// Environment variable read when no seed is configured.
pub const SEED_ENV: &str = "SSGP_SEED";

#[derive(Debug, Parser)]
#[command(name = "ssgp", version, about = "Image-guided interpolation of sparse flow, scene flow and depth maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker cap; computation is single-threaded and identical for any value.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, value_name = "HxW")]
        size: Option<String>,
    },
    /// Train a model on a dataset, or on fresh synthetic scenes without `--data`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Start from this checkpoint instead of fresh weights.
        #[arg(long)]
        init: Option<PathBuf>,
        /// With `--init`, start with zero optimizer moments.
        #[arg(long)]
        reset_optimizer: bool,
    },
    /// Densify one sparse input.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        sparse: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// `.flo` for two-channel maps, PFM otherwise.
        #[arg(long)]
        output: PathBuf,
    },
    /// Metrics of a checkpoint (or the nearest-neighbour baseline) on a split.
    Eval(EvalArgs),
    /// Relative metric under increasing input noise.
    SweepNoise(EvalArgs),
    /// Relative metric under decreasing input density.
    SweepDensity(EvalArgs),
    /// Parameters and FLOPs of the configured model.
    Count {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "HxW")]
        size: Option<String>,
    },
    /// Run the built-in verification suites.
    Selftest {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint directory; the nearest-valid-neighbour baseline when absent.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
}

/// Height and width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Size(pub usize, pub usize);

impl FromStr for Size {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (h, w) = s.split_once('x').ok_or_else(|| format!("size `{s}` is not HxW"))?;
        let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("size `{s}`: {e}"));
        Ok(Size(p(h)?, p(w)?))
    }
}

impl std::fmt::Display for Size {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.0, self.1)
    }
}

/// Keys owned by the command line rather than the model or trainer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    /// `standard`, `toy` or `guidenet_like`; applied before model keys.
    pub preset: String,
    pub size: Size,
    pub count: usize,
    pub density: f64,
    pub pattern: Pattern,
    pub noise: Option<(NoiseKind, f64)>,
    pub test_fraction: f64,
    /// Draw fresh sparse inputs from the ground truth at every training step.
    pub resparsify: bool,
    /// Drop stored optimizer moments when training starts from `--init`.
    pub reset_optimizer: bool,
    pub margin: usize,
    pub noise_kinds: Vec<NoiseKind>,
    pub noise_levels: Vec<f64>,
    pub densities: Vec<f64>,
    /// Sweep metric; the task's outlier rate (MAE for depth) when empty.
    pub metric: String,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::OpticalFlow,
            seed: 0,
            preset: "standard".into(),
            size: Size(96, 96),
            count: 50,
            density: 0.05,
            pattern: Pattern::Uniform,
            noise: None,
            test_fraction: 0.2,
            resparsify: false,
            reset_optimizer: false,
            margin: 10,
            noise_kinds: vec![NoiseKind::Gaussian, NoiseKind::Laplacian],
            noise_levels: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
            densities: vec![1.0, 0.5, 0.2, 0.1, 0.05, 0.02, 0.01],
            metric: String::new(),
            threads: 1,
        }
    }
}

fn pattern_text(p: Pattern) -> String {
    match p {
        Pattern::Uniform => "uniform".into(),
        Pattern::Scanlines { jitter } => format!("scanlines:{jitter}"),
    }
}

fn parse_pattern(key: &str, v: &str) -> Result<Pattern> {
    match v.split_once(':') {
        None if v == "uniform" => Ok(Pattern::Uniform),
        None if v == "scanlines" => Ok(Pattern::Scanlines { jitter: 0 }),
        Some(("scanlines", j)) => Ok(Pattern::Scanlines {
            jitter: config::value(key, j)?,
        }),
        _ => Err(Error::Config(format!("{key}: unknown pattern `{v}` (uniform, scanlines[:jitter])"))),
    }
}

fn parse_noise(key: &str, v: &str) -> Result<Option<(NoiseKind, f64)>> {
    if v == "none" {
        return Ok(None);
    }
    let (kind, level) = v
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("{key}: expected none or kind:level, got `{v}`")))?;
    Ok(Some((config::value(key, kind)?, config::value(key, level)?)))
}

impl KeyValue for RunConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "task" => self.task = config::value(key, v)?,
            "seed" => self.seed = config::value(key, v)?,
            "preset" => self.preset = v.to_string(),
            "size" => self.size = config::value(key, v)?,
            "count" => self.count = config::value(key, v)?,
            "density" => self.density = config::value(key, v)?,
            "pattern" => self.pattern = parse_pattern(key, v)?,
            "noise" => self.noise = parse_noise(key, v)?,
            "test_fraction" => self.test_fraction = config::value(key, v)?,
            "resparsify" => self.resparsify = config::flag(key, v)?,
            "reset_optimizer" => self.reset_optimizer = config::flag(key, v)?,
            "margin" => self.margin = config::value(key, v)?,
            "noise_kinds" => self.noise_kinds = config::list(key, v)?,
            "noise_levels" => self.noise_levels = config::list(key, v)?,
            "densities" => self.densities = config::list(key, v)?,
            "metric" => self.metric = v.to_string(),
            "threads" => self.threads = config::value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("task", self.task.to_string()),
            ("seed", self.seed.to_string()),
            ("preset", self.preset.clone()),
            ("size", self.size.to_string()),
            ("count", self.count.to_string()),
            ("density", self.density.to_string()),
            ("pattern", pattern_text(self.pattern)),
            ("noise", self.noise.map_or("none".into(), |(k, l)| format!("{k}:{l}"))),
            ("test_fraction", self.test_fraction.to_string()),
            ("resparsify", self.resparsify.to_string()),
            ("reset_optimizer", self.reset_optimizer.to_string()),
            ("margin", self.margin.to_string()),
            ("noise_kinds", config::join(&self.noise_kinds)),
            ("noise_levels", config::join(&self.noise_levels)),
            ("densities", config::join(&self.densities)),
            ("metric", self.metric.clone()),
            ("threads", self.threads.to_string()),
        ]
    }
}

impl RunConfig {
    pub fn sparsification(&self) -> Sparsification {
        Sparsification {
            pattern: self.pattern,
            density: self.density,
            noise: self.noise,
        }
    }

    pub fn sweep_metric(&self) -> String {
        if !self.metric.is_empty() {
            return self.metric.clone();
        }
        match self.task {
            Task::OpticalFlow => "koe".into(),
            Task::SceneFlow => "koe_sf".into(),
            Task::Depth => "mae".into(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!("test_fraction {} outside [0, 1)", self.test_fraction)));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Config(format!("density {} outside (0, 1]", self.density)));
        }
        Ok(())
    }
}

/// Run, model and training settings after all overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub run: RunConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Resolved {
    /// Apply `pairs` in order on top of the defaults. `preset` and `task`
    /// pick the base model before any model key is applied.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut run = RunConfig::default();
        if let Ok(s) = std::env::var(SEED_ENV) {
            run.seed = config::value(SEED_ENV, &s)?;
        }
        for (k, v) in pairs {
            if k == "preset" || k == "task" {
                run.set(k, v)?;
            }
        }
        let out = run.task.channels();
        let mut model = match run.preset.as_str() {
            "standard" => ModelConfig::standard(out),
            "toy" => ModelConfig::toy(out),
            "guidenet_like" => ModelConfig::guidenet_like(out),
            p => return Err(Error::Config(format!("unknown preset `{p}` (standard, toy, guidenet_like)"))),
        };
        let mut train = TrainConfig::new(run.task, 1000);
        config::apply(&mut [&mut run, &mut model, &mut train], pairs)?;
        train.task = run.task;
        train.seed = run.seed;
        run.validate()?;
        model.validate()?;
        train.validate()?;
        Ok(Resolved { run, model, train })
    }

    pub fn to_text(&self) -> String {
        let mut e = self.run.entries();
        e.extend(self.model.entries());
        e.extend(self.train.entries());
        config::render(&e)
    }
}

fn split_set(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{s}`")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> Result<Resolved> {
    let mut pairs = Vec::new();
    if let Some(p) = &common.config {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        pairs.extend(config::parse(&text)?);
    }
    for s in &common.set {
        pairs.push(split_set(s)?);
    }
    for (k, v) in flags {
        if let Some(v) = v {
            pairs.push((k.to_string(), v.clone()));
        }
    }
    if let Some(seed) = common.seed {
        pairs.push(("seed".into(), seed.to_string()));
    }
    if let Some(t) = common.threads {
        pairs.push(("threads".into(), t.to_string()));
    }
    Resolved::from_pairs(&pairs)
}

fn out_dir(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Error::Config("--out is required for this command".into()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn snapshot(dir: &Path, r: &Resolved) -> Result<()> {
    write(&dir.join(RESOLVED_CONFIG), &r.to_text())
}

/// A failure to report: usage errors exit with 1, everything else with 2.
enum Failure {
    Usage(Error),
    Runtime(Error),
}

/// Parse `args` (program name first), run, and return the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cmd: Command) -> std::result::Result<(), Failure> {
    let usage = Failure::Usage;
    let runtime = Failure::Runtime;
    match cmd {
        Command::Synth { common, task, count, size } => {
            let r = resolve(&common, &[("task", task), ("count", count.map(|c| c.to_string())), ("size", size)]).map_err(usage)?;
            let out = out_dir(&common).map_err(usage)?;
            synth(out, &r).map_err(runtime)
        }
        Command::Train {
            common,
            data,
            init,
            reset_optimizer,
        } => {
            let r = resolve(&common, &[("reset_optimizer", reset_optimizer.then(|| "true".into()))]).map_err(usage)?;
            let out = out_dir(&common).map_err(usage)?;
            train_cmd(out, data.as_deref(), init.as_deref(), &r).map_err(runtime)
        }
        Command::Infer {
            common,
            ckpt,
            image,
            sparse,
            mask,
            output,
        } => {
            let r = resolve(&common, &[]).map_err(usage)?;
            infer(&common, &r, &ckpt, &image, &sparse, &mask, &output).map_err(runtime)
        }
        Command::Eval(a) => {
            let r = resolve(&a.common, &[]).map_err(usage)?;
            let out = out_dir(&a.common).map_err(usage)?;
            eval_cmd(out, &a, &r, EvalKind::Metrics).map_err(runtime)
        }
        Command::SweepNoise(a) => {
            let r = resolve(&a.common, &[]).map_err(usage)?;
            let out = out_dir(&a.common).map_err(usage)?;
            eval_cmd(out, &a, &r, EvalKind::Noise).map_err(runtime)
        }
        Command::SweepDensity(a) => {
            let r = resolve(&a.common, &[]).map_err(usage)?;
            let out = out_dir(&a.common).map_err(usage)?;
            eval_cmd(out, &a, &r, EvalKind::Density).map_err(runtime)
        }
        Command::Count { common, size } => {
            let r = resolve(&common, &[("size", size)]).map_err(usage)?;
            count(&common, &r).map_err(runtime)
        }
        Command::Selftest { common } => {
            let r = resolve(&common, &[]).map_err(usage)?;
            if let Some(out) = &common.out {
                snapshot(out, &r).map_err(runtime)?;
            }
            let mut failed = 0;
            for s in crate::selftest::run_all() {
                println!("{} {}: {}", if s.passed { "PASS" } else { "FAIL" }, s.name, s.detail);
                failed += usize::from(!s.passed);
            }
            if failed > 0 {
                return Err(runtime(Error::Config(format!("{failed} selftest suite(s) failed"))));
            }
            Ok(())
        }
    }
}

fn synth(out: &Path, r: &Resolved) -> Result<()> {
    let run = &r.run;
    let ds = Dataset::create(out, run.task)?;
    snapshot(out, r)?;
    let params = SceneParams::new(run.size.0, run.size.1, run.task);
    let sp = run.sparsification();
    let n_test = (run.count as f64 * run.test_fraction).round() as usize;
    for i in 0..run.count {
        let scene = synth_scene(stream_seed(run.seed, i as u64), &params)?;
        let sample = sp.apply(&scene, stream_seed(run.seed ^ 0x5eed, i as u64))?;
        let split = if i < run.count - n_test { "train" } else { "test" };
        ds.save(split, &sample_id(i), &sample)?;
    }
    println!("wrote {} samples ({} test) to {}", run.count, n_test, out.display());
    Ok(())
}

fn train_cmd(out: &Path, data: Option<&Path>, init: Option<&Path>, r: &Resolved) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    snapshot(out, r)?;
    let mut model = match init {
        Some(dir) => {
            let m = load_model(dir, r.run.reset_optimizer)?;
            if m.config() != &r.model {
                return Err(Error::Config(format!(
                    "checkpoint {} holds a different model than the configuration describes",
                    dir.display()
                )));
            }
            m
        }
        None => build_model::<f32>(&r.model, r.run.seed)?,
    };
    let log = match data {
        Some(dir) => {
            let ds = Dataset::open(dir)?;
            if ds.task != r.run.task {
                return Err(Error::Config(format!("dataset holds {}, config trains {}", ds.task, r.run.task)));
            }
            let mut src = MemorySource {
                samples: ds.load_split("train")?,
                resparsify: r.run.resparsify.then(|| r.run.sparsification()),
                seed: r.run.seed,
            };
            train(&mut model, &mut src, &r.train, Some(out))?
        }
        None => {
            let mut src = SyntheticSource {
                scene: SceneParams::new(r.run.size.0, r.run.size.1, r.run.task),
                sparsification: r.run.sparsification(),
                pool: None,
                seed: r.run.seed,
            };
            train(&mut model, &mut src, &r.train, Some(out))?
        }
    };
    println!(
        "trained {} steps, final loss {:.5}, checkpoint {}",
        log.entries.len(),
        log.last_loss().unwrap_or(f64::NAN),
        out.join("final").display()
    );
    Ok(())
}

fn infer(common: &Common, r: &Resolved, ckpt: &Path, image: &Path, sparse: &Path, mask: &Path, output: &Path) -> Result<()> {
    if let Some(out) = &common.out {
        snapshot(out, r)?;
    }
    let model = load_model(ckpt, true)?;
    let c = model.config().out_channels;
    let features = read_map(sparse, c)?;
    let image = read_ppm(image)?;
    let sparse = MaskedFeature::new(features, read_pgm_mask(mask)?)?;
    let s = sparse.shape();
    let task = match c {
        1 => Task::Depth,
        2 => Task::OpticalFlow,
        _ => Task::SceneFlow,
    };
    let sample = Sample {
        image,
        gt: sparse.features.clone(),
        gt_mask: sparse.mask.clone(),
        sparse,
        task,
    };
    sample.validate()?;
    let dense = model.predict(&sample)?;
    if output.extension().is_some_and(|e| e == "flo") {
        write_flo(output, &dense)?;
    } else {
        write_map(output, &dense)?;
    }
    println!("wrote {}x{} {}-channel map to {}", s.h, s.w, c, output.display());
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum EvalKind {
    Metrics,
    Noise,
    Density,
}

fn eval_cmd(out: &Path, a: &EvalArgs, r: &Resolved, kind: EvalKind) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    snapshot(out, r)?;
    let ds = Dataset::open(&a.data)?;
    let samples = ds.load_split(&a.split)?;
    let model = a.ckpt.as_deref().map(|p| load_model(p, true)).transpose()?;
    let predictor: &dyn Predictor = match &model {
        Some(m) => m,
        None => &NearestFill,
    };
    let opts = EvalOptions { margin: r.run.margin };
    let metric = r.run.sweep_metric();
    let (file, text) = match kind {
        EvalKind::Metrics => {
            let report = evaluate(predictor, &samples, opts)?;
            report.check_invariants()?;
            for m in &report.metrics {
                println!("{:<14} {:>12.5} {}", m.name, m.value, m.unit);
            }
            ("metrics.csv", report.to_csv())
        }
        EvalKind::Noise => {
            let rows = sweep_noise(predictor, &samples, &r.run.noise_kinds, &r.run.noise_levels, &metric, r.run.seed, opts)?;
            ("sweep_noise.csv", sweep_to_csv(&rows))
        }
        EvalKind::Density => {
            let rows = sweep_density(predictor, &samples, &r.run.densities, &metric, r.run.seed, opts)?;
            ("sweep_density.csv", sweep_to_csv(&rows))
        }
    };
    if kind != EvalKind::Metrics {
        print!("{text}");
    }
    write(&out.join(file), &text)
}

fn count(common: &Common, r: &Resolved) -> Result<()> {
    if let Some(out) = &common.out {
        snapshot(out, r)?;
    }
    let Size(h, w) = r.run.size;
    let (params, flops) = accounting(&r.model, h, w)?;
    println!("parameters {params}");
    println!("flops {flops} ({:.3} GFLOPs at {h}x{w})", flops as f64 / 1e9);
    Ok(())
}
