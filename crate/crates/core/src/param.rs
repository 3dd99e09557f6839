//! Trainable parameters, initialization and the Adam optimizer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable array with its gradient and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub adam_m: Vec<T>,
    pub adam_v: Vec<T>,
    pub step_count: u64,
}

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    /// Zero-mean normal with variance `2 / fan_in`.
    ReluScaled,
    /// `ReluScaled` with the standard deviation multiplied by the square
    /// root of the kernel tap count (`shape[2..]`), for convolutions whose
    /// output is divided by the valid count of the window.
    MaskNormalized,
    Zeros,
}

impl<T: Scalar> Parameter<T> {
    pub fn from_values(name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != value.len() {
            return Err(Error::shape(
                "parameter",
                format!("shape {shape:?} needs {n} values, got {}", value.len()),
            ));
        }
        Ok(Parameter {
            name: name.into(),
            shape,
            grad: vec![T::zero(); n],
            adam_m: vec![T::zero(); n],
            adam_v: vec![T::zero(); n],
            value,
            step_count: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn cast<U: Scalar>(&self) -> Parameter<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect();
        Parameter {
            name: self.name.clone(),
            shape: self.shape.clone(),
            value: conv(&self.value),
            grad: conv(&self.grad),
            adam_m: conv(&self.adam_m),
            adam_v: conv(&self.adam_v),
            step_count: self.step_count,
        }
    }
}

/// Draw a parameter of `shape`.
///
/// `fan_in` must be positive; draws come from `rng` so that building the same
/// architecture from the same seed reproduces it bit for bit.
pub fn init_weights<T: Scalar, R: Rng + ?Sized>(
    name: impl Into<String>,
    shape: Vec<usize>,
    fan_in: usize,
    mode: InitMode,
    rng: &mut R,
) -> Result<Parameter<T>> {
    if fan_in == 0 {
        return Err(Error::Config("init_weights: fan_in must be positive".into()));
    }
    let n: usize = shape.iter().product();
    let value = match mode {
        InitMode::Zeros => vec![T::zero(); n],
        InitMode::ReluScaled | InitMode::MaskNormalized => {
            let taps: usize = if mode == InitMode::MaskNormalized {
                shape.iter().skip(2).product()
            } else {
                1
            };
            let std = (2.0 / fan_in as f64).sqrt() * (taps as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            (0..n)
                .map(|_| T::from_f64_lossy(normal.sample(rng)))
                .collect()
        }
    };
    Parameter::from_values(name, shape, value)
}

/// Ordered collection of all trainable parameters of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn push(&mut self, p: Parameter<T>) -> ParamId {
        self.params.push(p);
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(Parameter::cast).collect(),
        }
    }

    /// Hex SHA-256 over names, shapes and values.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in &p.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &p.value {
                h.update(v.to_f64_lossy().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter; gradients are zeroed
/// afterwards. A non-finite gradient aborts before anything is modified.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, lr: f64, cfg: AdamConfig) -> Result<()> {
    if let Some(bad) = store
        .iter()
        .find(|p| p.grad.iter().any(|g| !g.is_finite()))
    {
        return Err(Error::NonFinite(format!("gradient of parameter `{}`", bad.name)));
    }
    for p in store.iter_mut() {
        p.step_count += 1;
        let t = p.step_count as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        for i in 0..p.value.len() {
            let g = p.grad[i].to_f64_lossy();
            let m = b1 * p.adam_m[i].to_f64_lossy() + (1.0 - b1) * g;
            let v = b2 * p.adam_v[i].to_f64_lossy() + (1.0 - b2) * g * g;
            p.adam_m[i] = T::from_f64_lossy(m);
            p.adam_v[i] = T::from_f64_lossy(v);
            let update = lr * (m / bc1) / ((v / bc2).sqrt() + cfg.epsilon);
            p.value[i] = T::from_f64_lossy(p.value[i].to_f64_lossy() - update);
        }
        p.zero_grad();
    }
    Ok(())
}
