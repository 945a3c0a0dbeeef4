use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};
use crate::features::FeatureVector;

pub const EMBEDDING_DIM: usize = 128;
/// Allowed deviation of an embedding norm from 1.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// A point on the unit hypersphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `v`; a zero vector is an error rather than a NaN.
    pub fn normalize(mut v: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&v);
        if norm == 0.0 || !norm.is_finite() {
            return Err(ReidError::DegenerateEmbedding);
        }
        for x in &mut v {
            *x /= norm;
        }
        Ok(Self(v))
    }

    /// Wraps values that are already unit length.
    pub fn from_unit(v: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&v);
        if v.is_empty() || (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(ReidError::invalid(format!("embedding norm {norm} is not 1")));
        }
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    /// Rounds every coordinate to the nearest `f32`, the precision galleries store.
    pub fn quantized(&self) -> Self {
        Self(self.0.iter().map(|&x| x as f32 as f64).collect())
    }

    pub fn distance(&self, other: &Embedding) -> f64 {
        euclidean(&self.0, &other.0)
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = ReidError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::from_unit(v)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Linear projection `F -> 128` followed by unit normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingHead {
    pub feature_dim: usize,
    /// Row-major `feature_dim x 128`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct HeadForward {
    pub embedding: Embedding,
    /// Norm of the projection before normalization.
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl HeadGrad {
    pub fn zeros(feature_dim: usize) -> Self {
        Self { weight: vec![0.0; feature_dim * EMBEDDING_DIM], bias: vec![0.0; EMBEDDING_DIM] }
    }
}

impl EmbeddingHead {
    /// Gaussian weights with standard deviation `init_std`, zero bias.
    pub fn random(feature_dim: usize, init_std: f64, seed: u64) -> Result<Self> {
        if feature_dim == 0 {
            return Err(ReidError::invalid("feature_dim must be positive"));
        }
        let normal = Normal::new(0.0, init_std).map_err(|e| ReidError::invalid(format!("init_std: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = (0..feature_dim * EMBEDDING_DIM).map(|_| normal.sample(&mut rng)).collect();
        Ok(Self { feature_dim, weight, bias: vec![0.0; EMBEDDING_DIM] })
    }

    pub fn from_parts(feature_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != feature_dim * EMBEDDING_DIM || bias.len() != EMBEDDING_DIM {
            return Err(ReidError::invalid("head parameter shapes do not match feature_dim x 128"));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(ReidError::invalid("head parameters must be finite"));
        }
        Ok(Self { feature_dim, weight, bias })
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// `W^T f + b` before normalization.
    pub fn project(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.feature_dim {
            return Err(ReidError::invalid(format!("feature length {} does not match head input {}", f.len(), self.feature_dim)));
        }
        let mut v = self.bias.clone();
        for (row, &x) in self.weight.chunks_exact(EMBEDDING_DIM).zip(f) {
            if x != 0.0 {
                for (vj, wj) in v.iter_mut().zip(row) {
                    *vj += x * wj;
                }
            }
        }
        Ok(v)
    }

    /// Component `j` of [`Self::project`], summed in the same order.
    pub(crate) fn project_one(&self, f: &[f64], j: usize) -> f64 {
        let mut v = self.bias[j];
        for (row, &x) in self.weight.chunks_exact(EMBEDDING_DIM).zip(f) {
            if x != 0.0 {
                v += x * row[j];
            }
        }
        v
    }

    pub fn forward(&self, f: &[f64]) -> Result<HeadForward> {
        let v = self.project(f)?;
        let norm = l2_norm(&v);
        let embedding = Embedding::normalize(v)?;
        Ok(HeadForward { embedding, norm })
    }

    pub fn embed(&self, f: &FeatureVector) -> Result<Embedding> {
        Ok(self.forward(f.as_slice())?.embedding)
    }

    /// Back-propagates `d_embedding` through normalization and the projection.
    /// Accumulates into `grad` and returns the gradient with respect to `f`.
    pub fn backward(&self, f: &[f64], fwd: &HeadForward, d_embedding: &[f64], grad: &mut HeadGrad) -> Vec<f64> {
        let e = fwd.embedding.as_slice();
        // d/dv of v/|v| is (I - e e^T) / |v|
        let proj: f64 = e.iter().zip(d_embedding).map(|(a, b)| a * b).sum();
        let dv: Vec<f64> = e.iter().zip(d_embedding).map(|(ei, gi)| (gi - proj * ei) / fwd.norm).collect();
        for (b, g) in grad.bias.iter_mut().zip(&dv) {
            *b += g;
        }
        let mut df = vec![0.0; self.feature_dim];
        for ((i, row), grow) in self.weight.chunks_exact(EMBEDDING_DIM).enumerate().zip(grad.weight.chunks_exact_mut(EMBEDDING_DIM)) {
            let x = f[i];
            let mut acc = 0.0;
            for j in 0..EMBEDDING_DIM {
                grow[j] += x * dv[j];
                acc += row[j] * dv[j];
            }
            df[i] = acc;
        }
        df
    }

    pub fn sgd_step(&mut self, grad: &HeadGrad, lr: f64) {
        for (w, g) in self.weight.iter_mut().zip(&grad.weight) {
            *w -= lr * g;
        }
        for (b, g) in self.bias.iter_mut().zip(&grad.bias) {
            *b -= lr * g;
        }
    }
}

/// Embeds a feature vector with `head`.
pub fn embed(head: &EmbeddingHead, f: &FeatureVector) -> Result<Embedding> {
    head.embed(f)
}
