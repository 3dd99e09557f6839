//! Parameter and FLOP counts across the ablation variants.

use ssgp::network::{accounting, Guidance, ModelConfig};

fn main() -> ssgp::Result<()> {
    let (h, w) = (384, 1280);
    let base = ModelConfig::standard(2);
    let variants = [
        ("unguided", ModelConfig { guidance: Guidance::None, ..base.clone() }),
        ("encoder guidance", ModelConfig { guidance: Guidance::Enc, ..base.clone() }),
        ("decoder guidance", ModelConfig { guidance: Guidance::Dec, ..base.clone() }),
        ("full guidance, flat", base.clone()),
        ("full guidance, flat, refined", ModelConfig { refine: true, ..base.clone() }),
        ("full guidance, per-channel", ModelConfig { flat_affinity: false, ..base.clone() }),
        ("guidenet-like", ModelConfig::guidenet_like(2)),
    ];
    println!("{:<30} {:>12} {:>12}", "variant", "params (M)", "GFLOPs");
    for (name, cfg) in variants {
        let (p, f) = accounting(&cfg, h, w)?;
        println!("{name:<30} {:>12.3} {:>12.2}", p as f64 / 1e6, f as f64 / 1e9);
    }
    Ok(())
}
