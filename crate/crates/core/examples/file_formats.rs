//! Write a synthetic sample in the on-disk formats and read it back.

use ssgp::data::formats::{read_flo, read_map, read_pgm_mask, read_ppm, write_flo, write_map, write_pgm_mask, write_ppm};
use ssgp::data::{sparsify, synth_scene, Pattern, SceneParams, Task};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("ssgp-example-formats");
    std::fs::create_dir_all(&dir)?;

    let flow = synth_scene(3, &SceneParams::new(40, 56, Task::OpticalFlow))?;
    let sparse = sparsify(&flow.gt, &flow.gt_mask, Pattern::Uniform, 0.1, 3)?;
    let files = [dir.join("image.ppm"), dir.join("flow.flo"), dir.join("sparse.pfm"), dir.join("mask.pgm")];
    write_ppm(&files[0], &flow.image)?;
    write_flo(&files[1], &flow.gt)?;
    write_map(&files[2], &sparse.features)?;
    write_pgm_mask(&files[3], &sparse.mask)?;

    let image = read_ppm(&files[0])?;
    let max_quant = image.data().iter().zip(flow.image.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    println!("image.ppm   8-bit, largest quantization error {max_quant:.4}");
    println!("flow.flo    exact: {}", read_flo(&files[1])? == flow.gt);
    println!("sparse.pfm  exact: {}", read_map(&files[2], 2)? == sparse.features);
    println!("mask.pgm    exact: {}", read_pgm_mask(&files[3])? == sparse.mask);

    for task in [Task::SceneFlow, Task::Depth] {
        let s = synth_scene(4, &SceneParams::new(32, 32, task))?;
        let path = dir.join(format!("{task}.pfm"));
        write_map(&path, &s.gt)?;
        let c = s.gt.shape().c;
        println!("{task} ({c} channels) as PFM exact: {}", read_map(&path, c)? == s.gt);
    }
    for f in &files {
        let len = std::fs::metadata(f)?.len();
        println!("{:<12} {len:>7} bytes", f.file_name().unwrap().to_string_lossy());
    }
    Ok(())
}
