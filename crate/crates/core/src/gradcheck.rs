//! Central finite-difference gradient checks in double precision.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central difference half-step.
    pub step: f64,
    /// Gradient magnitudes below this are compared absolutely.
    pub floor: f64,
    /// Upper bound on probed coordinates; larger problems are subsampled.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-6,
            floor: 1e-6,
            max_coords: 2000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinate with the largest error, e.g. `input 0 [17]` or `conv.weight [3]`.
    pub worst: String,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

#[derive(Clone, Copy)]
enum Coord {
    Input(usize, usize),
    Param(usize, usize),
}

/// Compare the analytic gradient of `f` against central differences.
///
/// `f` records a computation on the given input vars. Non-scalar outputs are
/// projected onto fixed random weights first, so every output element
/// contributes.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], params: &ParamStore<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, params, &vars)?;
    let projection = (g.shape(out).len() > 1).then(|| {
        let s = g.shape(out);
        Tensor::from_fn(s, |_, _, _| rng.gen_range(-1.0..1.0))
    });
    let root = match &projection {
        Some(w) => g.weighted_sum(out, w)?,
        None => out,
    };
    let mut analytic_params = params.clone();
    analytic_params.zero_grad();
    let grads = g.backward(root, &mut analytic_params)?;

    let scalar_at = |inputs: &[Tensor<f64>], params: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, params, &vars)?;
        Ok(match &projection {
            Some(w) => g.value(out).dot(w),
            None => g.value(out).data()[0],
        })
    };

    let mut coords = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        coords.extend((0..t.data().len()).map(|j| Coord::Input(i, j)));
    }
    for (i, p) in params.iter().enumerate() {
        coords.extend((0..p.len()).map(|j| Coord::Param(i, j)));
    }
    if coords.len() > opts.max_coords {
        let mut picked = sample(&mut rng, coords.len(), opts.max_coords).into_vec();
        picked.sort_unstable();
        coords = picked.into_iter().map(|i| coords[i]).collect();
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: String::new(),
    };
    let mut xs = inputs.to_vec();
    let mut ps = params.clone();
    for c in coords {
        let (analytic, label) = match c {
            Coord::Input(i, j) => (
                grads.get(vars[i]).map_or(0.0, |t| t.data()[j]),
                format!("input {i} [{j}]"),
            ),
            Coord::Param(i, j) => {
                let p = analytic_params.iter().nth(i).expect("param index");
                (p.grad[j], format!("{} [{j}]", p.name))
            }
        };
        let orig = coord_value(c, &mut xs, &mut ps, None);
        coord_value(c, &mut xs, &mut ps, Some(orig + opts.step));
        let up = scalar_at(&xs, &ps)?;
        coord_value(c, &mut xs, &mut ps, Some(orig - opts.step));
        let down = scalar_at(&xs, &ps)?;
        coord_value(c, &mut xs, &mut ps, Some(orig));

        let numeric = (up - down) / (2.0 * opts.step);
        let denom = analytic.abs().max(numeric.abs()).max(opts.floor);
        let err = (analytic - numeric).abs() / denom;
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = err;
            report.worst = format!("{label}: analytic {analytic:.6e}, numeric {numeric:.6e}");
        }
    }
    Ok(report)
}

/// Read a coordinate, optionally overwriting it; returns the old value.
fn coord_value(c: Coord, xs: &mut [Tensor<f64>], ps: &mut ParamStore<f64>, set: Option<f64>) -> f64 {
    let v = match c {
        Coord::Input(i, j) => &mut xs[i].data_mut()[j],
        Coord::Param(i, j) => &mut ps.iter_mut().nth(i).expect("param index").value[j],
    };
    let old = *v;
    if let Some(new) = set {
        *v = new;
    }
    old
}
