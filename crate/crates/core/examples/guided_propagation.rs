//! Spread a few sparse values over a step edge, once with uniform kernels
//! and once with kernels derived from the guidance image. A ones channel is
//! propagated alongside the values; their ratio is the kernel-weighted mean
//! of the valid neighbours.

use ssgp::propagation::{propagate_flat, stability_transform, AffinityField};
use ssgp::{MaskedFeature, Shape, Tensor};

const H: usize = 9;
const W: usize = 12;

fn row(t: &Tensor<f64>, y: usize) -> String {
    (0..W).map(|x| format!("{:5.1}", t.get(0, y, x))).collect::<Vec<_>>().join(" ")
}

/// Repeat stage-1 propagation until every pixel is reached.
fn fill(input: &MaskedFeature<f64>, aff: &AffinityField<f64>) -> ssgp::Result<(Tensor<f64>, usize)> {
    let mut value = input.features.clone();
    let mut mask = input.mask.clone();
    let mut rounds = 0;
    while mask.data().contains(&0.0) {
        let both = Tensor::from_fn(Shape::new(2, H, W), |c, y, x| if c == 0 { value.get(0, y, x) } else { mask.get(0, y, x) });
        let out = propagate_flat(&MaskedFeature::new(both, mask)?, aff)?;
        value = Tensor::from_fn(Shape::new(1, H, W), |_, y, x| {
            let w = out.features.get(1, y, x);
            if w > 0.0 {
                out.features.get(0, y, x) / w
            } else {
                0.0
            }
        });
        mask = out.mask;
        rounds += 1;
    }
    Ok((value, rounds))
}

fn main() -> ssgp::Result<()> {
    // guidance: dark left half, bright right half
    let image: Tensor<f64> = Tensor::from_fn(Shape::new(1, H, W), |_, _, x| if x < W / 2 { 0.1 } else { 0.9 });
    let depth = |x: usize| if x < W / 2 { 10.0 } else { 40.0 };
    let seeds = [(1, 1), (7, 2), (4, 4), (2, 8), (6, 10), (8, 7)];
    let mut values = Tensor::zeros(Shape::new(1, H, W));
    let mut mask = Tensor::zeros(Shape::new(1, H, W));
    for &(y, x) in &seeds {
        values.set(0, y, x, depth(x));
        mask.set(0, y, x, 1.0);
    }
    let input = MaskedFeature::new(values, mask)?;

    let uniform = AffinityField::new(Tensor::ones(Shape::new(8, H, W)), 3)?;
    // neighbours across the edge get (almost) no weight
    let guided = AffinityField::new(
        Tensor::from_fn(Shape::new(8, H, W), |j, y, x| {
            let j = if j < 4 { j } else { j + 1 };
            let (qy, qx) = (y as isize + j as isize / 3 - 1, x as isize + j as isize % 3 - 1);
            if qy < 0 || qx < 0 || qy >= H as isize || qx >= W as isize {
                return 0.0;
            }
            let d = image.get(0, y, x) - image.get(0, qy as usize, qx as usize);
            (-(d * d) * 200.0).exp()
        }),
        3,
    )?;

    let (a, ra) = fill(&input, &uniform)?;
    let (b, rb) = fill(&input, &guided)?;
    println!("row 4, truth:   {}", (0..W).map(|x| format!("{:5.1}", depth(x))).collect::<Vec<_>>().join(" "));
    println!("uniform ({ra} rounds): {}", row(&a, 4));
    println!("guided  ({rb} rounds): {}", row(&b, 4));

    let err = |t: &Tensor<f64>| (0..H * W).map(|i| (t.data()[i] - depth(i % W)).abs()).sum::<f64>() / (H * W) as f64;
    println!("mean abs error: uniform {:.2}, guided {:.2}", err(&a), err(&b));

    // refinement kernels: off-centre weights sum to at most one
    let st = stability_transform(&guided);
    let worst = (0..H * W)
        .map(|i| (0..8).map(|j| st.off_center.data()[j * H * W + i].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    println!("largest stabilized off-centre sum {worst:.6}");
    Ok(())
}
