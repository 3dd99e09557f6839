//! Train the small model on synthetic optical flow, compare it with
//! nearest-neighbour filling, then save, reload and reuse the checkpoint.
//!
//! `cargo run --release --example train_flow -- [steps] [size]`

use ssgp::data::{NoiseKind, SceneParams, Task};
use ssgp::evaluation::{evaluate, EvalOptions, NearestFill, Predictor};
use ssgp::network::{build_model, ModelConfig};
use ssgp::training::{load_model, save_model, train, SampleSource, Sparsification, SyntheticSource, TrainConfig};

fn main() -> ssgp::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(1000);
    let size: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(64);

    let sp = Sparsification::uniform(0.05).with_noise(NoiseKind::Gaussian, 1.0);
    let scene = SceneParams::new(size, size, Task::OpticalFlow);
    let mut model = build_model::<f32>(&ModelConfig::toy(2), 1)?;
    println!("toy model with {} parameters", model.params.scalar_count());

    let mut cfg = TrainConfig::new(Task::OpticalFlow, steps);
    cfg.seed = 1;
    cfg.initial_lr = 1e-3;
    let mut src = SyntheticSource { scene: scene.clone(), sparsification: sp.clone(), pool: Some(200), seed: 1 };
    let log = train(&mut model, &mut src, &cfg, None)?;
    let every = (steps / 5).max(1);
    for (step, lr, loss) in log.entries.iter().step_by(every) {
        println!("step {step:>5}  lr {lr:.2e}  loss {loss:.4}");
    }

    let mut test_src = SyntheticSource { scene, sparsification: sp, pool: None, seed: 99 };
    let test: Vec<_> = (0..10).map(|i| test_src.draw(i)).collect::<ssgp::Result<_>>()?;
    let opts = EvalOptions { margin: 4 };
    let ours = evaluate(&model, &test, opts)?;
    let nearest = evaluate(&NearestFill, &test, opts)?;
    for name in ["epe", "koe", "orr"] {
        println!("{name:<4} model {:8.3}  nearest fill {:8.3}", ours.get(name).unwrap(), nearest.get(name).unwrap());
    }

    let dir = std::env::temp_dir().join("ssgp-example-flow");
    save_model(&dir, &model)?;
    let reloaded = load_model(&dir, true)?;
    let same = reloaded.predict(&test[0])? == model.predict(&test[0])?;
    println!("checkpoint at {} reproduces predictions: {same}", dir.display());
    Ok(())
}
