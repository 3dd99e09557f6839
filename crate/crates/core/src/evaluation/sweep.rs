use std::fmt::Write as _;

use super::{evaluate, EvalOptions, Predictor};
use crate::data::{add_noise, sparsify, NoiseKind, Pattern, Sample};
use crate::error::{Error, Result};
use crate::training::stream_seed;

/// One point of a robustness curve.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub kind: String,
    pub level: f64,
    pub metric: String,
    pub relative: f64,
    pub absolute: f64,
}

/// `value / baseline`; 1 when both are zero, +inf when only the baseline is.
pub fn relative_value(value: f64, baseline: f64) -> f64 {
    if baseline == 0.0 {
        if value == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        value / baseline
    }
}

fn score(predictor: &dyn Predictor, samples: &[Sample], metric: &str, opts: EvalOptions) -> Result<f64> {
    let r = evaluate(predictor, samples, opts)?;
    r.get(metric)
        .ok_or_else(|| Error::Config(format!("metric `{metric}` not reported for {}", r.task)))
}

/// Relative `metric` under noise injected into the sparse inputs, against
/// the clean inputs. Level 0 reuses the clean score.
pub fn sweep_noise(
    predictor: &dyn Predictor,
    samples: &[Sample],
    kinds: &[NoiseKind],
    levels: &[f64],
    metric: &str,
    seed: u64,
    opts: EvalOptions,
) -> Result<Vec<SweepRow>> {
    let baseline = score(predictor, samples, metric, opts)?;
    let mut rows = Vec::new();
    for (ki, kind) in kinds.iter().enumerate() {
        for (li, &level) in levels.iter().enumerate() {
            let absolute = if level == 0.0 {
                baseline
            } else {
                let cell = stream_seed(seed, ((ki as u64) << 32) | li as u64);
                let noisy = samples
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let mut s = s.clone();
                        s.sparse = add_noise(&s.sparse, *kind, level, stream_seed(cell, i as u64))?;
                        Ok(s)
                    })
                    .collect::<Result<Vec<_>>>()?;
                score(predictor, &noisy, metric, opts)?
            };
            rows.push(SweepRow {
                kind: kind.to_string(),
                level,
                metric: metric.into(),
                relative: relative_value(absolute, baseline),
                absolute,
            });
        }
    }
    Ok(rows)
}

/// Relative `metric` when the sparse inputs are thinned to a fraction of
/// their valid pixels, against the unthinned inputs.
pub fn sweep_density(
    predictor: &dyn Predictor,
    samples: &[Sample],
    densities: &[f64],
    metric: &str,
    seed: u64,
    opts: EvalOptions,
) -> Result<Vec<SweepRow>> {
    let baseline = score(predictor, samples, metric, opts)?;
    let mut rows = Vec::new();
    for (di, &density) in densities.iter().enumerate() {
        let absolute = if density >= 1.0 {
            baseline
        } else {
            let cell = stream_seed(seed, di as u64);
            let thinned = samples
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut s = s.clone();
                    s.sparse = thin(s.sparse.features.clone(), &s.sparse.mask, density, stream_seed(cell, i as u64))?;
                    Ok(s)
                })
                .collect::<Result<Vec<_>>>()?;
            score(predictor, &thinned, metric, opts)?
        };
        rows.push(SweepRow {
            kind: "density".into(),
            level: density,
            metric: metric.into(),
            relative: relative_value(absolute, baseline),
            absolute,
        });
    }
    Ok(rows)
}

/// Uniform thinning that redraws until at least one pixel survives.
fn thin(features: crate::Tensor, mask: &crate::Tensor, density: f64, seed: u64) -> Result<crate::MaskedFeature> {
    for attempt in 0..64 {
        let out = sparsify(&features, mask, Pattern::Uniform, density, stream_seed(seed, attempt))?;
        if out.mask.data().iter().any(|&m| m != 0.0) {
            return Ok(out);
        }
    }
    Err(Error::EmptyMask("sweep_density"))
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("kind,level,metric,relative_value,absolute_value\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:e},{:e}", r.kind, r.level, r.metric, r.relative, r.absolute);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_scene, SceneParams, Task};
    use crate::evaluation::NearestFill;

    fn samples() -> Vec<Sample> {
        (0..2)
            .map(|seed| {
                let mut s = synth_scene(seed, &SceneParams::new(32, 32, Task::OpticalFlow)).unwrap();
                s.sparse = sparsify(&s.gt, &s.gt_mask, Pattern::Uniform, 0.2, seed).unwrap();
                s
            })
            .collect()
    }

    #[test]
    fn relative_at_zero_baseline() {
        assert_eq!(relative_value(0.0, 0.0), 1.0);
        assert_eq!(relative_value(2.0, 0.0), f64::INFINITY);
        assert_eq!(relative_value(3.0, 2.0), 1.5);
    }

    #[test]
    fn level_zero_is_one_and_curves_repeat() {
        let s = samples();
        let kinds = [NoiseKind::Gaussian, NoiseKind::Laplacian];
        let a = sweep_noise(&NearestFill, &s, &kinds, &[0.0, 2.0, 5.0], "epe", 4, EvalOptions::default()).unwrap();
        let b = sweep_noise(&NearestFill, &s, &kinds, &[0.0, 2.0, 5.0], "epe", 4, EvalOptions::default()).unwrap();
        assert_eq!(sweep_to_csv(&a), sweep_to_csv(&b));
        assert_eq!(a.len(), 6);
        assert_eq!(a[0].relative, 1.0);
        assert_eq!(a[3].relative, 1.0);
        assert!(a[2].relative > a[1].relative);

        let d = sweep_density(&NearestFill, &s, &[1.0, 0.5, 0.1], "epe", 4, EvalOptions::default()).unwrap();
        assert_eq!(d[0].relative, 1.0);
        assert!(d[2].absolute > d[0].absolute);
        assert!(sweep_density(&NearestFill, &s, &[1.0], "nonsense", 4, EvalOptions::default()).is_err());
    }
}
