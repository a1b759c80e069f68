//! Dense model vectors.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

/// A model `x ∈ R^p` held by one agent (or a message carrying one).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelVec(pub Vec<f64>);

impl ModelVec {
    pub fn zeros(dim: usize) -> Self {
        ModelVec(vec![0.0; dim])
    }

    pub fn filled(dim: usize, value: f64) -> Self {
        ModelVec(vec![value; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm_inf(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn dist_sq(&self, other: &[f64]) -> f64 {
        debug_assert_eq!(self.0.len(), other.len());
        self.0
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// `self += scale * other`
    pub fn axpy(&mut self, scale: f64, other: &[f64]) {
        debug_assert_eq!(self.0.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(other) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.0 {
            *a *= factor;
        }
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ModelVec {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ModelVec {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ModelVec {
    fn from(v: Vec<f64>) -> Self {
        ModelVec(v)
    }
}

impl From<&[f64]> for ModelVec {
    fn from(v: &[f64]) -> Self {
        ModelVec(v.to_vec())
    }
}

impl<const N: usize> From<[f64; N]> for ModelVec {
    fn from(v: [f64; N]) -> Self {
        ModelVec(v.to_vec())
    }
}

impl FromIterator<f64> for ModelVec {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        ModelVec(iter.into_iter().collect())
    }
}
