use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;

use super::LocalObjective;
use crate::error::{Error, Result};
use crate::model::ModelVec;
use crate::rng::{stream_rng, SimRng};

/// Weight of the ridge regularizer `f₀(x) = (0.01/2)‖x‖²`.
pub const SOFTMAX_REGULARIZATION: f64 = 0.01;

pub const DEFAULT_BATCH_SIZE: usize = 32;

/// Labelled feature vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f32>,
    labels: Vec<u8>,
    feature_dim: usize,
    classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f32>,
        labels: Vec<u8>,
        feature_dim: usize,
        classes: usize,
    ) -> Result<Self> {
        if feature_dim == 0 || features.len() != labels.len() * feature_dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * feature_dim,
                actual: features.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            feature_dim,
            classes,
        })
    }

    /// Balanced Gaussian blobs: class `m` is centred on a random mean with
    /// norm about `separation`, with unit isotropic noise.
    pub fn gaussian_blobs(
        classes: usize,
        feature_dim: usize,
        samples: usize,
        separation: f64,
        seed: u64,
    ) -> Self {
        let mut rng = stream_rng(seed, 0);
        let scale = separation / (feature_dim as f64).sqrt();
        let means: Vec<Vec<f64>> = (0..classes)
            .map(|_| {
                (0..feature_dim)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let mut labels: Vec<u8> = (0..samples).map(|i| (i % classes) as u8).collect();
        labels.shuffle(&mut rng);
        let mut features = Vec::with_capacity(samples * feature_dim);
        for &l in &labels {
            for &m in &means[l as usize] {
                let noise: f64 = rng.sample(StandardNormal);
                features.push((m + noise) as f32);
            }
        }
        Dataset {
            features,
            labels,
            feature_dim,
            classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Parameter dimension `p = M · feature_dim`.
    pub fn model_dim(&self) -> usize {
        self.classes * self.feature_dim
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// The first `n` samples.
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            features: self.features[..n * self.feature_dim].to_vec(),
            labels: self.labels[..n].to_vec(),
            feature_dim: self.feature_dim,
            classes: self.classes,
        }
    }

    /// The first `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let rest = Dataset {
            features: self.features[n * self.feature_dim..].to_vec(),
            labels: self.labels[n..].to_vec(),
            feature_dim: self.feature_dim,
            classes: self.classes,
        };
        (self.truncated(n), rest)
    }

    /// Class logits `(x)_m^T v` for sample `i`.
    fn logits(&self, x: &[f64], i: usize, out: &mut [f64]) {
        let v = self.sample(i);
        let d = self.feature_dim;
        for (m, o) in out.iter_mut().enumerate() {
            let block = &x[m * d..(m + 1) * d];
            *o = block.iter().zip(v).map(|(w, &f)| w * f as f64).sum();
        }
    }

    /// Index of the largest logit; ties go to the lowest class.
    pub fn predict(&self, x: &[f64], i: usize) -> usize {
        let mut logits = vec![0.0; self.classes];
        self.logits(x, i, &mut logits);
        argmax(&logits)
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (m, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = m;
        }
    }
    best
}

/// In-place softmax; returns `ln Σ exp(z)`.
fn softmax_in_place(z: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

/// Mean cross-entropy over `samples` and its gradient, accumulated into
/// `grad` (which must be zeroed by the caller).
fn cross_entropy(
    data: &Dataset,
    x: &[f64],
    samples: impl ExactSizeIterator<Item = usize>,
    grad: &mut [f64],
) -> f64 {
    let d = data.feature_dim;
    let count = samples.len();
    let inv = 1.0 / count as f64;
    let mut probs = vec![0.0; data.classes];
    let mut loss = 0.0;
    for i in samples {
        data.logits(x, i, &mut probs);
        let label = data.labels[i] as usize;
        let true_logit = probs[label];
        let log_norm = softmax_in_place(&mut probs);
        loss += log_norm - true_logit;
        probs[label] -= 1.0;
        let v = data.sample(i);
        for (m, &r) in probs.iter().enumerate() {
            let coef = r * inv;
            if coef == 0.0 {
                continue;
            }
            for (g, &f) in grad[m * d..(m + 1) * d].iter_mut().zip(v) {
                *g += coef * f as f64;
            }
        }
    }
    loss * inv
}

/// Multinomial logistic regression on one agent's shard with ridge
/// regularizer `(0.01/2)‖x‖²`.
///
/// The model is `M` blocks of `feature_dim` weights; block `m` scores class
/// `m`.
#[derive(Debug, Clone)]
pub struct SoftmaxObjective {
    data: Arc<Dataset>,
    shard: Vec<usize>,
    regularization: f64,
    batch_size: usize,
}

impl SoftmaxObjective {
    pub fn new(data: Arc<Dataset>, shard: Vec<usize>, batch_size: usize) -> Result<Self> {
        if shard.is_empty() {
            return Err(Error::Config(
                "softmax objective needs at least one sample".into(),
            ));
        }
        if let Some(&bad) = shard.iter().find(|&&i| i >= data.len()) {
            return Err(Error::Config(format!("sample index {bad} out of range")));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(SoftmaxObjective {
            data,
            shard,
            regularization: SOFTMAX_REGULARIZATION,
            batch_size,
        })
    }

    pub fn shard(&self) -> &[usize] {
        &self.shard
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.data
    }

    pub fn classes(&self) -> usize {
        self.data.classes
    }

    /// Average cross-entropy over `batch` (positions within this agent's
    /// shard) plus the regularizer, and the matching gradient.
    pub fn loss_and_gradient(&self, x: &[f64], batch: &[usize]) -> Result<(f64, ModelVec)> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        if let Some(&bad) = batch.iter().find(|&&b| b >= self.shard.len()) {
            return Err(Error::Config(format!("batch position {bad} outside shard")));
        }
        let mut grad = ModelVec::zeros(x.len());
        let ce = cross_entropy(
            &self.data,
            x,
            batch.iter().map(|&b| self.shard[b]),
            &mut grad,
        );
        let sq: f64 = x.iter().map(|v| v * v).sum();
        grad.axpy(self.regularization, x);
        Ok((ce + 0.5 * self.regularization * sq, grad))
    }

    /// Class probabilities of shard sample `pos` under `x`.
    pub fn probabilities(&self, x: &[f64], pos: usize) -> Vec<f64> {
        let mut z = vec![0.0; self.data.classes];
        self.data.logits(x, self.shard[pos], &mut z);
        softmax_in_place(&mut z);
        z
    }
}

impl LocalObjective for SoftmaxObjective {
    fn dim(&self) -> usize {
        self.data.model_dim()
    }

    fn sample_gradient(&self, x: &[f64], rng: &mut SimRng) -> ModelVec {
        let mut grad = ModelVec::zeros(x.len());
        let take = self.batch_size.min(self.shard.len());
        let picks = index::sample(rng, self.shard.len(), take);
        cross_entropy(
            &self.data,
            x,
            picks.iter().map(|p| self.shard[p]),
            &mut grad,
        );
        grad
    }

    fn expected_gradient(&self, x: &[f64]) -> ModelVec {
        let mut grad = ModelVec::zeros(x.len());
        cross_entropy(&self.data, x, self.shard.iter().copied(), &mut grad);
        grad
    }

    fn regularizer_gradient(&self, x: &[f64]) -> ModelVec {
        x.iter().map(|v| self.regularization * v).collect()
    }

    fn expected_loss(&self, x: &[f64]) -> f64 {
        let mut scratch = vec![0.0; x.len()];
        let ce = cross_entropy(&self.data, x, self.shard.iter().copied(), &mut scratch);
        ce + 0.5 * self.regularization * x.iter().map(|v| v * v).sum::<f64>()
    }
}

/// Fraction of `eval` samples whose most probable class equals the label.
pub fn accuracy(eval: &Dataset, x: &[f64]) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    if x.len() != eval.model_dim() {
        return Err(Error::DimensionMismatch {
            expected: eval.model_dim(),
            actual: x.len(),
        });
    }
    let hits = (0..eval.len())
        .filter(|&i| eval.predict(x, i) == eval.labels[i] as usize)
        .count();
    Ok(hits as f64 / eval.len() as f64)
}
