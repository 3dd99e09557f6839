//! Generate synthetic scenes for every task, sparsify them, and write a
//! small dataset directory that the command-line tool can read back.

use ssgp::data::dataset::{sample_id, Dataset};
use ssgp::data::{add_noise, sparsify, synth_scene, NoiseKind, Pattern, SceneParams, Task};
use ssgp::training::stream_seed;

fn main() -> ssgp::Result<()> {
    for task in [Task::OpticalFlow, Task::SceneFlow, Task::Depth] {
        let s = synth_scene(7, &SceneParams::new(48, 64, task))?;
        let gt = &s.gt;
        let range: Vec<String> = (0..gt.shape().c)
            .map(|c| {
                let ch = gt.channel(c);
                let lo = ch.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = ch.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                format!("[{lo:.2}, {hi:.2}]")
            })
            .collect();
        println!("{task}: image {}, ground truth {} with channel ranges {}", s.image.shape(), gt.shape(), range.join(" "));
        for (name, pattern) in [("uniform", Pattern::Uniform), ("scanlines", Pattern::Scanlines { jitter: 1 })] {
            let sp = sparsify(gt, &s.gt_mask, pattern, 0.05, 1)?;
            println!("  {name:<9} 5% -> {:.2}% valid", 100.0 * sp.density());
        }
        let sp = sparsify(gt, &s.gt_mask, Pattern::Uniform, 0.05, 1)?;
        let noisy = add_noise(&sp, NoiseKind::Laplacian, 2.0, 3)?;
        let moved = noisy.features.data().iter().zip(sp.features.data()).filter(|(a, b)| a != b).count();
        println!("  laplacian noise (scale 2) changed {moved} values, all under valid pixels");
    }

    let dir = std::env::temp_dir().join("ssgp-example-dataset");
    let ds = Dataset::create(&dir, Task::OpticalFlow)?;
    let params = SceneParams::new(32, 32, Task::OpticalFlow);
    for i in 0..4 {
        let s = synth_scene(stream_seed(0, i), &params)?;
        let sparse = sparsify(&s.gt, &s.gt_mask, Pattern::Uniform, 0.1, i)?;
        let split = if i < 3 { "train" } else { "test" };
        ds.save(split, &sample_id(i as usize), &ssgp::data::Sample { sparse, ..s })?;
    }
    let back = Dataset::open(&dir)?;
    println!(
        "dataset at {}: {} train, {} test samples",
        dir.display(),
        back.load_split("train")?.len(),
        back.load_split("test")?.len()
    );
    Ok(())
}
