//! Named parameter storage, initialisation and the Adam optimiser.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Gradients, Matrix, Tape, Tensor, Var};

/// Standard deviation of embedding initialisation.
pub const EMBED_INIT_STD: f64 = 1.0;

/// Half-width `1/√fan_in` of the uniform range for a dense layer. LSTM
/// cells use their hidden size as the fan-in.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("unknown parameter `{0}`")]
    Unknown(String),
    #[error("parameter `{0}` already exists")]
    Duplicate(String),
    #[error("non-finite gradient in `{0}`; step aborted")]
    NonFiniteGrad(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    index: BTreeMap<String, usize>,
    tensors: Vec<Tensor>,
}

/// Serialised form of one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Matrix) -> Result<usize, ParamError> {
        if self.index.contains_key(name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        self.tensors.push(Tensor::new(value, true));
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<usize, ParamError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ParamError> {
        Ok(&self.tensors[self.id(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, ParamError> {
        let id = self.id(name)?;
        Ok(&mut self.tensors[id])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    /// Records every parameter on `tape`: as leaves when `trainable`, as
    /// constants otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundParams<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable && t.requires_grad {
                    tape.leaf(t.value.clone())
                } else {
                    tape.constant(t.value.clone())
                }
            })
            .collect();
        BoundParams {
            vars,
            index: self.index.clone(),
        }
    }

    /// Adds the gradients reaching `bound` into each tensor's `grad`.
    /// Parameters the loss did not touch receive zeros.
    pub fn accumulate_grads(&mut self, bound: &BoundParams<'_>, grads: &Gradients) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            if t.requires_grad {
                t.accumulate(&grads.get_or_zeros(v));
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(|t| t.grad.as_ref())
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let k = max_norm / norm;
            for g in self.tensors.iter_mut().filter_map(|t| t.grad.as_mut()) {
                g.mapv_inplace(|v| v * k);
            }
        }
        norm
    }

    pub fn to_named_arrays(&self) -> Vec<NamedArray> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| {
                let (r, c) = t.value.dim();
                NamedArray {
                    name: name.clone(),
                    shape: [r, c],
                    data: t.value.iter().copied().collect(),
                }
            })
            .collect()
    }

    /// Overwrites values from `arrays`; every existing parameter must be
    /// present with its current shape.
    pub fn load_named_arrays(&mut self, arrays: &[NamedArray]) -> Result<(), ParamError> {
        let by_name: BTreeMap<&str, &NamedArray> =
            arrays.iter().map(|a| (a.name.as_str(), a)).collect();
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let a = by_name
                .get(name.as_str())
                .ok_or_else(|| ParamError::Unknown(name.clone()))?;
            let expected = t.shape();
            if a.shape.to_vec() != expected || a.data.len() != expected.iter().product::<usize>() {
                return Err(ParamError::Shape {
                    name: name.clone(),
                    expected,
                    found: a.shape.to_vec(),
                });
            }
            t.value = Matrix::from_shape_vec((a.shape[0], a.shape[1]), a.data.clone())
                .expect("shape checked above");
        }
        if let Some(extra) = arrays.iter().find(|a| !self.index.contains_key(&a.name)) {
            return Err(ParamError::Unknown(extra.name.clone()));
        }
        Ok(())
    }
}

/// Tape handles for every parameter of a [`ParamStore`].
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
    index: BTreeMap<String, usize>,
}

impl<'t> BoundParams<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>, ParamError> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, half_width: f64) -> Matrix {
    let dist = Uniform::new_inclusive(-half_width, half_width).expect("valid range");
    Matrix::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

pub fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, 1.0).expect("unit normal");
    Matrix::from_shape_simple_fn((rows, cols), || std * dist.sample(rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment estimates for one [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Matrix> = params
            .tensors()
            .iter()
            .map(|t| Matrix::zeros(t.value.dim()))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One bias-corrected update from the stored gradients. A non-finite
    /// gradient aborts the step before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<(), ParamError> {
        for (name, t) in params.names().iter().zip(params.tensors()) {
            if let Some(g) = &t.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(ParamError::NonFiniteGrad(name.clone()));
                }
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((t, m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let Some(g) = &t.grad else { continue };
            if !t.requires_grad {
                continue;
            }
            ndarray::Zip::from(&mut t.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

/// Fresh seeded generator for parameter initialisation and shuffling.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draws a random permutation of `0..n`.
pub fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn single(value: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", array![[value]]).unwrap();
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [-3.0, 1e-3, 42.0] {
            let mut p = single(0.5);
            let mut adam = Adam::new(&p, AdamConfig::default());
            p.get_mut("w").unwrap().grad = Some(array![[g]]);
            adam.step(&mut p).unwrap();
            let delta = (p.get("w").unwrap().value[[0, 0]] - 0.5).abs();
            // |g| / (|g| + eps) with eps = 1e-8
            assert!((delta - 1e-3).abs() < 1e-8, "g={g} delta={delta}");
        }
    }

    #[test]
    fn zero_grad_zero_update() {
        let mut p = single(0.5);
        let mut adam = Adam::new(&p, AdamConfig::default());
        p.get_mut("w").unwrap().grad = Some(array![[0.0]]);
        adam.step(&mut p).unwrap();
        assert_eq!(p.get("w").unwrap().value[[0, 0]], 0.5);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p = single(0.0);
        let mut adam = Adam::new(
            &p,
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
        );
        for _ in 0..200 {
            let w = p.get("w").unwrap().value[[0, 0]];
            p.get_mut("w").unwrap().grad = Some(array![[2.0 * (w - 3.0)]]);
            adam.step(&mut p).unwrap();
        }
        let w = p.get("w").unwrap().value[[0, 0]];
        assert!((w - 3.0).abs() < 0.05, "w = {w}");
    }

    #[test]
    fn nan_grad_aborts_without_update() {
        let mut p = single(1.0);
        let mut adam = Adam::new(&p, AdamConfig::default());
        p.get_mut("w").unwrap().grad = Some(array![[f64::NAN]]);
        assert_eq!(adam.step(&mut p), Err(ParamError::NonFiniteGrad("w".into())));
        assert_eq!(adam.step, 0);
        assert_eq!(p.get("w").unwrap().value[[0, 0]], 1.0);
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut p = ParamStore::new();
        p.insert("a", array![[0.0, 0.0]]).unwrap();
        p.get_mut("a").unwrap().grad = Some(array![[30.0, 40.0]]);
        assert_eq!(p.clip_grad_norm(5.0), 50.0);
        assert!((p.grad_norm() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn named_arrays_round_trip() {
        let mut rng = seeded_rng(3);
        let mut p = ParamStore::new();
        p.insert("x", uniform(&mut rng, 2, 3, fan_in_bound(4))).unwrap();
        p.insert("y", normal(&mut rng, 4, 1, EMBED_INIT_STD)).unwrap();
        let arrays = p.to_named_arrays();
        let mut q = p.clone();
        q.get_mut("x").unwrap().value.fill(0.0);
        q.load_named_arrays(&arrays).unwrap();
        assert_eq!(p, q);
        assert!(p.get("x").unwrap().value.iter().all(|v| v.abs() <= 0.5));
        assert_eq!(p.insert("x", array![[1.0]]), Err(ParamError::Duplicate("x".into())));
    }

    #[test]
    fn permutation_is_deterministic() {
        let a = permutation(&mut seeded_rng(9), 50);
        let b = permutation(&mut seeded_rng(9), 50);
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
