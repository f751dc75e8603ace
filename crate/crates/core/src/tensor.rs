//! Dense row-major f64 tensors and the named parameter store.
//!
//! `Tensor` is plain storage: the autodiff graph in [`crate::graph`] copies
//! values in as leaves and writes gradients back out by parameter name.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    /// Identity matrix, used by tests and copy-style initialization.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Truncated normal init: values resampled until within two standard
    /// deviations, the usual transformer weight init.
    pub fn trunc_normal(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        while data.len() < numel {
            let (a, b) = gauss_pair(rng);
            for v in [a, b] {
                if v.abs() <= 2.0 && data.len() < numel {
                    data.push(v * std);
                }
            }
        }
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Dim(format!("expected rank-2 tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Dim(format!(
                "gradient length {} does not match parameter length {}",
                g.len(),
                self.data.len()
            )));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (dst, src) in grad.iter_mut().zip(g) {
            *dst += src;
        }
        Ok(())
    }
}

// Box-Muller, two standard normals per draw.
fn gauss_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}

/// Named parameters plus the set of names excluded from updates.
///
/// Names are hierarchical, e.g. `semantic.qformer.layer0.wq`. Iteration is
/// always in sorted name order so every consumer sees one deterministic
/// ordering.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, mut tensor: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        tensor.requires_grad = true;
        self.params.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(|s| s.as_str())
    }

    /// Marks every parameter frozen except those matching one of `patterns`.
    /// A pattern is either an exact name or a `prefix.*` wildcard. Returns the
    /// trainable names. A pattern matching nothing is a configuration error.
    pub fn freeze_except(&mut self, patterns: &[String]) -> Result<BTreeSet<String>> {
        let mut trainable = BTreeSet::new();
        for pat in patterns {
            let mut hit = false;
            for name in self.params.keys() {
                if pattern_matches(pat, name) {
                    trainable.insert(name.clone());
                    hit = true;
                }
            }
            if !hit {
                return Err(Error::Config(format!("trainable pattern {pat:?} matches no parameter")));
            }
        }
        self.frozen = self
            .params
            .keys()
            .filter(|n| !trainable.contains(*n))
            .cloned()
            .collect();
        Ok(trainable)
    }

    pub fn set_frozen(&mut self, frozen: BTreeSet<String>) {
        self.frozen = frozen;
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .keys()
            .filter(|n| !self.frozen.contains(*n))
            .cloned()
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            t.grad = None;
        }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }
}

pub fn pattern_matches(pattern: &str, name: &str) -> bool {
    match pattern.strip_suffix(".*") {
        Some(prefix) => name.starts_with(prefix) && name.len() > prefix.len(),
        None => pattern == name,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn shape_data_length_must_agree() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn non_finite_construction_rejected() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn trunc_normal_bounded_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::trunc_normal(vec![64, 8], 0.02, &mut rng);
        assert!(a.data.iter().all(|v| v.abs() <= 0.04 + 1e-15));
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let b = Tensor::trunc_normal(vec![64, 8], 0.02, &mut rng2);
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn freeze_except_patterns() {
        let mut store = ParamStore::new();
        store.insert("a.x", Tensor::zeros(vec![1])).unwrap();
        store.insert("a.y", Tensor::zeros(vec![1])).unwrap();
        store.insert("b.x", Tensor::zeros(vec![1])).unwrap();
        let trainable = store.freeze_except(&["a.*".into()]).unwrap();
        assert_eq!(trainable.len(), 2);
        assert!(store.is_frozen("b.x"));
        assert!(!store.is_frozen("a.x"));
        assert!(store.freeze_except(&["c.*".into()]).is_err());
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::zeros(vec![2]);
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[0.5, 0.5]).unwrap();
        assert_eq!(t.grad.as_deref(), Some(&[1.5, 2.5][..]));
    }
}
