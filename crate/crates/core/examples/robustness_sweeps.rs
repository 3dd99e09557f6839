//! Relative error curves under input noise and input thinning, for the
//! nearest-neighbour baseline and a briefly trained model.

use ssgp::data::{NoiseKind, SceneParams, Task};
use ssgp::evaluation::{sweep_density, sweep_noise, sweep_to_csv, EvalOptions, NearestFill, Predictor};
use ssgp::network::{build_model, ModelConfig};
use ssgp::training::{train, SampleSource, Sparsification, SyntheticSource, TrainConfig};

fn main() -> ssgp::Result<()> {
    let scene = SceneParams::new(48, 48, Task::Depth);
    let mut model = build_model::<f32>(&ModelConfig::toy(1), 2)?;
    let mut src = SyntheticSource { scene: scene.clone(), sparsification: Sparsification::uniform(0.2), pool: Some(100), seed: 2 };
    let mut cfg = TrainConfig::new(Task::Depth, 600);
    cfg.initial_lr = 1e-3;
    train(&mut model, &mut src, &cfg, None)?;

    let mut test_src = SyntheticSource { scene, sparsification: Sparsification::uniform(0.2), pool: None, seed: 7 };
    let test: Vec<_> = (0..8).map(|i| test_src.draw(i)).collect::<ssgp::Result<_>>()?;
    let opts = EvalOptions { margin: 4 };
    let kinds = [NoiseKind::Gaussian, NoiseKind::Laplacian];
    let levels = [0.0, 0.5, 1.0, 2.0];
    let densities = [1.0, 0.5, 0.25, 0.1];

    let predictors: [(&str, &dyn Predictor); 2] = [("nearest fill", &NearestFill), ("toy model", &model)];
    for (name, p) in predictors {
        println!("# {name}");
        print!("{}", sweep_to_csv(&sweep_noise(p, &test, &kinds, &levels, "mae", 3, opts)?));
        print!("{}", sweep_to_csv(&sweep_density(p, &test, &densities, "mae", 3, opts)?));
    }
    Ok(())
}
