//! Metric reports over sample sets, the nearest-valid-neighbour baseline and
//! the robustness sweeps.

pub mod metrics;
mod sweep;

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

pub use metrics::{
    border_band, is_outlier, metric_boundary, metric_epe, metric_koe, metric_mae, metric_orr, metric_rmse,
    scene_flow_groups, OrrCounts, Pooled,
};
pub use sweep::{relative_value, sweep_density, sweep_noise, sweep_to_csv, SweepRow};

use crate::data::{denormalize, normalize, Sample, Task};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::sparse::MaskedFeature;
use crate::tensor::Tensor;

/// Anything that turns a sample into a dense prediction in target units.
pub trait Predictor {
    fn predict(&self, sample: &Sample) -> Result<Tensor>;
    /// Short identifier written to report CSVs.
    fn fingerprint(&self) -> String;
}

impl Predictor for Model {
    fn predict(&self, sample: &Sample) -> Result<Tensor> {
        let (n, stats) = normalize(sample)?;
        let out = self.forward(&n.image, &n.sparse)?;
        denormalize(&out.dense, &stats)
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config().to_text().as_bytes());
        h.update(self.params.fingerprint().as_bytes());
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Fill every pixel with the value of the closest valid input pixel;
/// ties go to the first in row-major order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NearestFill;

impl Predictor for NearestFill {
    fn predict(&self, sample: &Sample) -> Result<Tensor> {
        nearest_fill(&sample.sparse)
    }

    fn fingerprint(&self) -> String {
        "nearest".into()
    }
}

pub fn nearest_fill(sparse: &MaskedFeature) -> Result<Tensor> {
    let s = sparse.shape();
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); s.h];
    for y in 0..s.h {
        for x in 0..s.w {
            if sparse.mask.get(0, y, x) != 0.0 {
                rows[y].push(x);
            }
        }
    }
    if rows.iter().all(Vec::is_empty) {
        return Err(Error::EmptyMask("nearest_fill"));
    }
    let mut out = Tensor::zeros(s);
    for y in 0..s.h {
        for x in 0..s.w {
            let mut best: Option<(usize, usize, usize)> = None;
            for (yy, xs) in rows.iter().enumerate() {
                let dy = y.abs_diff(yy);
                if best.is_some_and(|b| dy * dy > b.0) {
                    continue;
                }
                for &xx in xs {
                    let dx = x.abs_diff(xx);
                    let d = dy * dy + dx * dx;
                    if best.is_none_or(|b| d < b.0) {
                        best = Some((d, yy, xx));
                    }
                }
            }
            let (_, yy, xx) = best.expect("non-empty support");
            for c in 0..s.c {
                out.set(c, y, x, sparse.features.get(c, yy, xx));
            }
        }
    }
    Ok(out)
}

/// Evaluation settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    /// Width of the border band of the boundary metrics, px.
    pub margin: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { margin: 10 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    pub unit: &'static str,
}

/// Pooled metrics of one predictor on a sample set.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub task: Task,
    pub samples: usize,
    pub metrics: Vec<Metric>,
    pub config_hash: String,
}

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.value)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value,unit,samples,config_hash\n");
        for m in &self.metrics {
            let _ = writeln!(s, "{},{:e},{},{},{}", m.name, m.value, m.unit, self.samples, self.config_hash);
        }
        s
    }

    /// Percentages within [0, 100], errors non-negative, RMSE not below MAE.
    pub fn check_invariants(&self) -> Result<()> {
        for m in &self.metrics {
            let ok = m.value.is_finite() && m.value >= 0.0 && (m.unit != "%" || m.value <= 100.0);
            if !ok {
                return Err(Error::NonFinite(format!("metric {} = {}", m.name, m.value)));
            }
        }
        for (mae, rmse) in [("mae", "rmse"), ("boundary_mae", "boundary_rmse")] {
            if let (Some(a), Some(r)) = (self.get(mae), self.get(rmse)) {
                if r < a * (1.0 - 1e-12) {
                    return Err(Error::Config(format!("{rmse} {r} below {mae} {a}")));
                }
            }
        }
        Ok(())
    }
}

/// Evaluate `predictor` on every sample, pooling over all valid pixels.
pub fn evaluate(predictor: &dyn Predictor, samples: &[Sample], opts: EvalOptions) -> Result<MetricsReport> {
    let preds = samples.iter().map(|s| predictor.predict(s)).collect::<Result<Vec<_>>>()?;
    evaluate_predictions(&preds, samples, opts, predictor.fingerprint())
}

/// Metrics for precomputed predictions in target units.
pub fn evaluate_predictions(preds: &[Tensor], samples: &[Sample], opts: EvalOptions, config_hash: String) -> Result<MetricsReport> {
    let first = samples.first().ok_or(Error::EmptyMask("evaluate: no samples"))?;
    if preds.len() != samples.len() {
        return Err(Error::Config(format!("{} predictions for {} samples", preds.len(), samples.len())));
    }
    let task = first.task;
    let motion = task.is_motion();
    let groups: Vec<(&'static str, std::ops::Range<usize>)> = match task {
        Task::SceneFlow => scene_flow_groups().to_vec(),
        Task::OpticalFlow => vec![("koe", 0..2)],
        Task::Depth => Vec::new(),
    };
    let ranges: Vec<_> = groups.iter().map(|g| g.1.clone()).collect();
    let mut all = Pooled::default();
    let mut band = Pooled::default();
    let mut band_ok = true;
    let mut orr = OrrCounts::default();
    for (pred, s) in preds.iter().zip(samples) {
        if s.task != task {
            return Err(Error::Config(format!("mixed tasks {task} and {}", s.task)));
        }
        all.add(pred, &s.gt, &s.gt_mask, &ranges)?;
        if motion {
            orr.add(&s.sparse, pred, &s.gt, &s.gt_mask)?;
        }
        match border_band(&s.gt_mask, opts.margin) {
            Ok(b) if b.data().iter().any(|&v| v != 0.0) => band.add(pred, &s.gt, &b, &[])?,
            _ => band_ok = false,
        }
    }
    let unit = if motion { "px" } else { "units" };
    let mut metrics = Vec::new();
    let mut push = |name: &str, value: f64, unit: &'static str| metrics.push(Metric { name: name.into(), value, unit });
    if motion {
        push("epe", all.epe(), "px");
        for (i, (name, _)) in groups.iter().enumerate() {
            push(name, all.koe(i), "%");
        }
        let (rate, vacuous) = orr.rate();
        push("orr", rate, "%");
        push("orr_vacuous", if vacuous { 1.0 } else { 0.0 }, "flag");
    }
    push("mae", all.mae(), unit);
    push("rmse", all.rmse(), unit);
    if band_ok {
        push("boundary_mae", band.mae(), unit);
        push("boundary_rmse", band.rmse(), unit);
    }
    Ok(MetricsReport {
        task,
        samples: samples.len(),
        metrics,
        config_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sparsify, synth_scene, Pattern, SceneParams};
    use crate::network::{build_model, ModelConfig};
    use crate::tensor::Shape;

    #[test]
    fn nearest_fill_copies_closest() {
        let f = Tensor::from_fn(Shape::new(1, 3, 5), |_, y, x| (10 * y + x) as f32);
        let m = Tensor::from_fn(Shape::new(1, 3, 5), |_, y, x| if (y, x) == (0, 0) || (y, x) == (2, 4) { 1.0 } else { 0.0 });
        let out = nearest_fill(&MaskedFeature::new(f, m).unwrap()).unwrap();
        assert_eq!(out.data(), &[0., 0., 0., 24., 24., 0., 0., 0., 24., 24., 0., 0., 24., 24., 24.]);
    }

    #[test]
    fn report_for_scene_flow_and_depth() {
        let mut samples = Vec::new();
        for seed in 0..2 {
            let mut s = synth_scene(seed, &SceneParams::new(32, 32, Task::SceneFlow)).unwrap();
            s.sparse = sparsify(&s.gt, &s.gt_mask, Pattern::Uniform, 0.1, seed).unwrap();
            samples.push(s);
        }
        let r = evaluate(&NearestFill, &samples, EvalOptions { margin: 4 }).unwrap();
        for m in ["epe", "koe_d0", "koe_d1", "koe_of", "koe_sf", "orr", "orr_vacuous", "mae", "rmse", "boundary_mae"] {
            assert!(r.get(m).is_some(), "{m}");
        }
        r.check_invariants().unwrap();
        assert!(r.to_csv().starts_with("metric,value,unit,samples,config_hash\nepe,"));

        let s = synth_scene(1, &SceneParams::new(32, 32, Task::Depth)).unwrap();
        let model = build_model::<f32>(&ModelConfig::toy(1), 0).unwrap();
        let r = evaluate(&model, &[s], EvalOptions::default()).unwrap();
        assert_eq!(r.get("epe"), None);
        assert!(r.get("boundary_mae").is_some());
        assert_eq!(r.config_hash.len(), 16);
    }
}
