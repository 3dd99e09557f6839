//! Normalized sparse convolution on a hand-made input, and the same layer
//! ignoring whatever sits under the invalid pixels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssgp::layers::{Activation, Conv2d};
use ssgp::param::{InitMode, ParamStore};
use ssgp::{Graph, MaskedFeature, Shape, Tensor};

fn show(label: &str, t: &Tensor<f64>) {
    println!("{label}:");
    let s = t.shape();
    for y in 0..s.h {
        let row: Vec<String> = (0..s.w).map(|x| format!("{:6.2}", t.get(0, y, x))).collect();
        println!("  {}", row.join(" "));
    }
}

fn main() -> ssgp::Result<()> {
    let (h, w) = (6, 8);
    let mask = Tensor::from_fn(Shape::new(1, h, w), |_, y, x| if (y * 3 + x * 5) % 7 == 0 { 1.0 } else { 0.0 });
    let values = Tensor::from_fn(Shape::new(1, h, w), |_, y, x| if mask.get(0, y, x) > 0.0 { (y + x) as f64 } else { 0.0 });
    let input = MaskedFeature::new(values, mask)?;

    // a box filter: every valid neighbour counts once
    let mut store = ParamStore::new();
    let conv = Conv2d::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), "box", 1, 1, 3, 1, InitMode::Zeros)?;
    store.get_mut(conv.weight).value.fill(1.0);

    let mut g = Graph::new();
    let x = g.masked_input(&input);
    let y = g.sparse_conv2d(&store, &conv, &x, Activation::Linear)?;
    let pooled = g.sparse_avg_pool(&y)?;
    let out = g.masked_value(&y);
    let down = g.masked_value(&pooled);

    show("input", &input.features);
    show("input mask", &input.mask);
    show("mean of valid neighbours", &out.features);
    show("output mask", &out.mask);
    show("pooled (stride 2)", &down.features);
    println!("density {:.2} -> {:.2} -> {:.2}", input.density(), out.density(), down.density());

    let mut noisy = input.clone();
    for (v, m) in noisy.features.data_mut().iter_mut().zip(input.mask.data()) {
        if *m == 0.0 {
            *v = 1e6;
        }
    }
    let mut g = Graph::new();
    let x = g.masked_input(&noisy);
    let y = g.sparse_conv2d(&store, &conv, &x, Activation::Linear)?;
    println!("output unchanged by values under mask 0: {}", g.masked_value(&y) == out);
    Ok(())
}
