//! Dense row-major tensor value.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Immutable dense tensor. Data is shared, so clones are cheap and values
/// are safe to hand across threads.
///
/// Storage is 64-bit throughout; gradient checks rely on it.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    /// Build from a shape and row-major data. The data length must equal the
    /// product of the dimensions.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            n,
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(&[], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor::new(shape, vec![v; shape.iter().product()])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(&mut f).collect())
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        Tensor::from_fn(shape, |_| rng::normal(rng) * std)
    }

    /// Uniform entries in `[0, 1)`.
    pub fn rand_uniform(shape: &[usize], rng: &mut Rng) -> Self {
        Tensor::from_fn(shape, |_| rng::uniform(rng))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    /// Single element of a scalar (or one-element) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor with {} elements", self.len());
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Mark as a trainable parameter. Consumes and returns the tensor so the
    /// flag can be set at construction sites.
    pub fn trained(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Checked mode: verify every entry is finite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numerical(format!(
                "{what}: non-finite value {} at flat index {i}",
                self.data[i]
            ))),
        }
    }

    /// Same shape and data, new value at one flat index. Used by the
    /// finite-difference checker.
    pub fn with_element(&self, flat: usize, v: f64) -> Self {
        let mut data = self.to_vec();
        data[flat] = v;
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
            requires_grad: self.requires_grad,
        }
    }

    pub fn reshaped(&self, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.len(), "reshape {:?} -> {:?}", self.shape, shape);
        Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            requires_grad: self.requires_grad,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
            requires_grad: false,
        }
    }

    /// Element-wise sum of two same-shape tensors.
    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape, "add shape mismatch");
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a + b)
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
            requires_grad: false,
        }
    }

    /// Flat index of a multi-dimensional position.
    pub fn flat_index(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(self.shape.iter()).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} (dim {dim})");
            flat = flat * dim + ix;
        }
        flat
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }
}

/// `v / max(‖v‖₂, epsilon)`. A zero vector stays zero for any positive
/// epsilon below 1.
pub fn l2_normalize(v: &[f64], epsilon: f64) -> Vec<f64> {
    assert!(epsilon > 0.0, "l2_normalize: epsilon must be positive");
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = norm.max(epsilon);
    v.iter().map(|x| x / denom).collect()
}

/// Cosine similarity, clamped to `[-1, 1]`. Norms are guarded by
/// [`crate::numerics::EPSILON`], so zero vectors yield 0.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(
            "cosine_sim",
            format!("vector lengths {} vs {}", a.len(), b.len()),
        ));
    }
    Ok(cosine_sim_unchecked(a, b))
}

pub(crate) fn cosine_sim_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let eps = super::EPSILON;
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot / (na.sqrt().max(eps) * nb.sqrt().max(eps))).clamp(-1.0, 1.0)
}
