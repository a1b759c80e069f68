//! Per-agent stochastic objectives `E[F(x, ξ_i)] + f₀(x)`.

mod idx;
mod partition;
mod quadratic;
mod softmax;

use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelVec;
use crate::rng::SimRng;

pub use idx::{load_idx_images, load_idx_labels, load_mnist_dir, ImageSet, MnistSplit};
pub use partition::{partition, PartitionMode};
pub use quadratic::QuadraticObjective;
pub use softmax::{
    accuracy, Dataset, SoftmaxObjective, DEFAULT_BATCH_SIZE, SOFTMAX_REGULARIZATION,
};

/// Strong convexity `u`, gradient Lipschitz constant `L` and gradient noise
/// bound `δ` (so `E‖∇F − E∇F‖² ≤ δ²`) of `E[F] + f₀`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub strong_convexity: f64,
    pub smoothness: f64,
    pub noise_bound: f64,
}

/// A regular agent's local cost.
///
/// `sample_gradient` draws `∇F(x, ξ)` for a fresh sample (or mini-batch);
/// its expectation is `expected_gradient`. The regularizer `f₀` is kept
/// separate because the update rules add `∇f₀` explicitly.
pub trait LocalObjective: Debug + Send + Sync {
    fn dim(&self) -> usize;

    fn sample_gradient(&self, x: &[f64], rng: &mut SimRng) -> ModelVec;

    fn expected_gradient(&self, x: &[f64]) -> ModelVec;

    fn regularizer_gradient(&self, x: &[f64]) -> ModelVec;

    /// `E[F(x, ξ)] + f₀(x)`.
    fn expected_loss(&self, x: &[f64]) -> f64;

    /// `∇E[F(x, ξ)] + ∇f₀(x)`.
    fn full_gradient(&self, x: &[f64]) -> ModelVec {
        let mut g = self.expected_gradient(x);
        g.axpy(1.0, &self.regularizer_gradient(x));
        g
    }

    fn constants(&self) -> Option<Constants> {
        None
    }

    fn as_quadratic(&self) -> Option<&QuadraticObjective> {
        None
    }
}

/// Gradient-norm threshold certifying the pooled optimum.
pub const OPTIMUM_TOLERANCE: f64 = 1e-6;

const OPTIMUM_MAX_ITERS: usize = 200_000;

/// Minimizer of `Σ_i (E[F_i] + f₀)` over the given (regular) objectives.
///
/// Quadratics use the closed form `Σ c_i b_i / Σ c_i`; anything else runs
/// accelerated gradient descent with backtracking and adaptive restart until
/// the pooled gradient norm drops below [`OPTIMUM_TOLERANCE`].
pub fn global_optimum(objectives: &[&dyn LocalObjective]) -> Result<ModelVec> {
    let first = objectives
        .first()
        .ok_or_else(|| Error::Config("global optimum of an empty objective set".into()))?;
    let dim = first.dim();
    if let Some(o) = objectives.iter().find(|o| o.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: o.dim(),
        });
    }
    let quads: Option<Vec<&QuadraticObjective>> =
        objectives.iter().map(|o| o.as_quadratic()).collect();
    if let Some(quads) = quads {
        return Ok(quadratic::pooled_minimizer(&quads));
    }
    pooled_descent(objectives, dim)
}

fn pooled_loss(objectives: &[&dyn LocalObjective], x: &[f64]) -> f64 {
    objectives.iter().map(|o| o.expected_loss(x)).sum()
}

fn pooled_gradient(objectives: &[&dyn LocalObjective], x: &[f64]) -> ModelVec {
    let mut g = ModelVec::zeros(x.len());
    for o in objectives {
        g.axpy(1.0, &o.full_gradient(x));
    }
    g
}

fn pooled_descent(objectives: &[&dyn LocalObjective], dim: usize) -> Result<ModelVec> {
    let mut x = ModelVec::zeros(dim);
    let mut y = x.clone();
    let mut momentum = 1.0_f64;
    let mut lipschitz = 1.0_f64;
    let mut fx = pooled_loss(objectives, &x);
    let mut residual = f64::INFINITY;
    for _ in 0..OPTIMUM_MAX_ITERS {
        let gy = pooled_gradient(objectives, &y);
        let fy = pooled_loss(objectives, &y);
        let gy_sq = gy.norm_sq();
        // Backtracking on the sufficient-decrease condition at y.
        let next = loop {
            let mut cand = y.clone();
            cand.axpy(-1.0 / lipschitz, &gy);
            if pooled_loss(objectives, &cand) <= fy - 0.5 * gy_sq / lipschitz + 1e-12 * fy.abs() {
                break cand;
            }
            lipschitz *= 2.0;
        };
        let f_next = pooled_loss(objectives, &next);
        if f_next > fx {
            // Adaptive restart.
            momentum = 1.0;
            y = x.clone();
            continue;
        }
        let m_next = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
        let beta = (momentum - 1.0) / m_next;
        let mut y_next = next.clone();
        for ((yv, &nv), &xv) in y_next.iter_mut().zip(next.iter()).zip(x.iter()) {
            *yv = nv + beta * (nv - xv);
        }
        x = next;
        fx = f_next;
        y = y_next;
        momentum = m_next;
        lipschitz /= 1.5;
        residual = pooled_gradient(objectives, &x).norm_sq().sqrt();
        if residual < OPTIMUM_TOLERANCE {
            return Ok(x);
        }
    }
    Err(Error::NoConvergence {
        what: "pooled optimum",
        iterations: OPTIMUM_MAX_ITERS,
        residual,
    })
}
