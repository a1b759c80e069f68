use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Constants, LocalObjective};
use crate::model::ModelVec;
use crate::rng::SimRng;

/// `E[F(x, ξ)] = (c/2)‖x − b‖²`, sampled gradient `c(x − b) + N(0, σ²I)`.
///
/// Strong convexity and smoothness both equal `c`; the gradient noise bound
/// is `δ² = p σ²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticObjective {
    pub target: ModelVec,
    pub curvature: f64,
    pub noise_std: f64,
}

impl QuadraticObjective {
    pub fn new(target: impl Into<ModelVec>, curvature: f64, noise_std: f64) -> Self {
        assert!(curvature > 0.0, "curvature must be positive");
        assert!(noise_std >= 0.0, "noise std must be nonnegative");
        QuadraticObjective {
            target: target.into(),
            curvature,
            noise_std,
        }
    }

    /// Noise-free quadratic.
    pub fn exact(target: impl Into<ModelVec>, curvature: f64) -> Self {
        QuadraticObjective::new(target, curvature, 0.0)
    }
}

impl LocalObjective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.target.dim()
    }

    fn sample_gradient(&self, x: &[f64], rng: &mut SimRng) -> ModelVec {
        let mut g = self.expected_gradient(x);
        if self.noise_std > 0.0 {
            for v in g.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += self.noise_std * z;
            }
        }
        g
    }

    fn expected_gradient(&self, x: &[f64]) -> ModelVec {
        debug_assert_eq!(x.len(), self.dim());
        x.iter()
            .zip(self.target.iter())
            .map(|(xi, bi)| self.curvature * (xi - bi))
            .collect()
    }

    fn regularizer_gradient(&self, x: &[f64]) -> ModelVec {
        ModelVec::zeros(x.len())
    }

    fn expected_loss(&self, x: &[f64]) -> f64 {
        0.5 * self.curvature * self.target.dist_sq(x)
    }

    fn constants(&self) -> Option<Constants> {
        Some(Constants {
            strong_convexity: self.curvature,
            smoothness: self.curvature,
            noise_bound: self.noise_std * (self.dim() as f64).sqrt(),
        })
    }

    fn as_quadratic(&self) -> Option<&QuadraticObjective> {
        Some(self)
    }
}

/// `Σ c_i b_i / Σ c_i`, coordinate-wise.
pub(super) fn pooled_minimizer(quads: &[&QuadraticObjective]) -> ModelVec {
    let dim = quads[0].dim();
    let total: f64 = quads.iter().map(|q| q.curvature).sum();
    (0..dim)
        .map(|d| quads.iter().map(|q| q.curvature * q.target[d]).sum::<f64>() / total)
        .collect()
}
