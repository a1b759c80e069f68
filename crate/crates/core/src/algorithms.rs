//! One-round update rules for a regular agent.
//!
//! Every rule receives the agent's model, the round's inbox (regular and
//! Byzantine messages, indistinguishable to the receiver), a stochastic
//! gradient sample and the regularizer gradient, and returns the next model.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelVec;

/// Norm used in the pairwise penalty `λ Σ ‖x_i − x_j‖`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyNorm {
    #[default]
    L1,
    L2,
    Linf,
}

impl std::str::FromStr for PenaltyNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(PenaltyNorm::L1),
            "l2" => Ok(PenaltyNorm::L2),
            "linf" | "l_inf" | "inf" => Ok(PenaltyNorm::Linf),
            other => Err(Error::Config(format!("unknown norm {other:?}"))),
        }
    }
}

/// A message in agent `receiver`'s inbox for one round.
#[derive(Debug, Clone)]
pub struct Message<'a> {
    pub sender: usize,
    pub payload: Cow<'a, [f64]>,
}

#[derive(Debug, Clone)]
pub struct Inbox<'a> {
    pub receiver: usize,
    pub messages: Vec<Message<'a>>,
}

impl<'a> Inbox<'a> {
    pub fn new(receiver: usize) -> Self {
        Inbox {
            receiver,
            messages: Vec::new(),
        }
    }

    pub fn push(&mut self, sender: usize, payload: impl Into<Cow<'a, [f64]>>) {
        self.messages.push(Message {
            sender,
            payload: payload.into(),
        });
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Element-wise sign with `sign(0) = 0`.
pub fn sign_vec(d: &[f64]) -> ModelVec {
    d.iter().map(|&v| sign(v)).collect()
}

/// A subgradient of `‖·‖` at `d`.
///
/// `L2` gives `d/‖d‖₂`; `Linf` puts `sign(d_m)` on the first coordinate of
/// largest magnitude. Both return zero at `d = 0`.
pub fn penalty_subgradient(norm: PenaltyNorm, d: &[f64]) -> ModelVec {
    let mut out = ModelVec::zeros(d.len());
    add_penalty_subgradient(norm, d.iter().copied(), &mut out);
    out
}

/// Adds the subgradient at `d` to `acc` without allocating.
fn add_penalty_subgradient(
    norm: PenaltyNorm,
    d: impl Iterator<Item = f64> + Clone,
    acc: &mut [f64],
) {
    match norm {
        PenaltyNorm::L1 => {
            for (a, v) in acc.iter_mut().zip(d) {
                *a += sign(v);
            }
        }
        PenaltyNorm::L2 => {
            let len = d.clone().map(|v| v * v).sum::<f64>().sqrt();
            if len > 0.0 {
                for (a, v) in acc.iter_mut().zip(d) {
                    *a += v / len;
                }
            }
        }
        PenaltyNorm::Linf => {
            let mut best: Option<(usize, f64)> = None;
            for (m, v) in d.enumerate() {
                if best.is_none_or(|(_, b)| v.abs() > b.abs()) {
                    best = Some((m, v));
                }
            }
            if let Some((m, v)) = best {
                acc[m] += sign(v);
            }
        }
    }
}

fn finish(agent: usize, x: ModelVec) -> Result<ModelVec> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFiniteUpdate { agent })
    }
}

fn check_dims(x: &[f64], inbox: &Inbox<'_>, grad: &[f64], reg: &[f64]) -> Result<()> {
    let p = x.len();
    for len in [grad.len(), reg.len()]
        .into_iter()
        .chain(inbox.messages.iter().map(|m| m.payload.len()))
    {
        if len != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                actual: len,
            });
        }
    }
    Ok(())
}

/// `x − α (g + λ Σ_m ∂‖x − m‖ + ∇f₀)` over every message in the inbox.
pub fn proposed_step(
    x: &[f64],
    inbox: &Inbox<'_>,
    grad_sample: &[f64],
    grad_reg: &[f64],
    lambda: f64,
    step: f64,
    norm: PenaltyNorm,
) -> Result<ModelVec> {
    check_dims(x, inbox, grad_sample, grad_reg)?;
    let mut penalty = vec![0.0; x.len()];
    if lambda != 0.0 {
        for m in &inbox.messages {
            let diff = x.iter().zip(m.payload.iter()).map(|(a, b)| a - b);
            add_penalty_subgradient(norm, diff, &mut penalty);
        }
    }
    let next = (0..x.len())
        .map(|d| x[d] - step * (grad_sample[d] + lambda * penalty[d] + grad_reg[d]))
        .collect();
    finish(inbox.receiver, next)
}

/// Equal-weight neighbor averaging followed by a stochastic gradient step.
pub fn dpsgd_step(
    x: &[f64],
    inbox: &Inbox<'_>,
    grad_sample: &[f64],
    grad_reg: &[f64],
    step: f64,
) -> Result<ModelVec> {
    check_dims(x, inbox, grad_sample, grad_reg)?;
    let weight = 1.0 / (1 + inbox.len()) as f64;
    let mut mixed = ModelVec::from(x);
    for m in &inbox.messages {
        mixed.axpy(1.0, &m.payload);
    }
    mixed.scale(weight);
    for d in 0..x.len() {
        mixed[d] -= step * (grad_sample[d] + grad_reg[d]);
    }
    finish(inbox.receiver, mixed)
}

/// Result of a trimmed-mean update.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeUpdate {
    pub model: ModelVec,
    /// False when the inbox was too small to trim and all values were averaged.
    pub trimmed: bool,
}

/// Mean of `values` after dropping the `trim` largest and `trim` smallest.
/// Falls back to the plain mean when there are at most `2·trim` values; the
/// flag is false in that case.
pub fn trimmed_mean(values: &mut [f64], trim: usize) -> (f64, bool) {
    let enough = values.len() > 2 * trim;
    let kept: &[f64] = if enough && trim > 0 {
        values.sort_unstable_by(f64::total_cmp);
        &values[trim..values.len() - trim]
    } else {
        values
    };
    (kept.iter().sum::<f64>() / kept.len() as f64, enough)
}

/// Coordinate-wise trimmed mean over the own model and all messages, then a
/// stochastic gradient step.
pub fn bridge_step(
    x: &[f64],
    inbox: &Inbox<'_>,
    grad_sample: &[f64],
    grad_reg: &[f64],
    step: f64,
    trim: usize,
) -> Result<BridgeUpdate> {
    check_dims(x, inbox, grad_sample, grad_reg)?;
    let trimmed = inbox.len() > 2 * trim;
    let trim = if trimmed { trim } else { 0 };
    let mut column = Vec::with_capacity(inbox.len() + 1);
    let mut next = ModelVec::zeros(x.len());
    for d in 0..x.len() {
        column.clear();
        column.push(x[d]);
        column.extend(inbox.messages.iter().map(|m| m.payload[d]));
        let (mean, _) = trimmed_mean(&mut column, trim);
        next[d] = mean - step * (grad_sample[d] + grad_reg[d]);
    }
    Ok(BridgeUpdate {
        model: finish(inbox.receiver, next)?,
        trimmed,
    })
}

/// Step size `α^k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    /// `min{floor, scale/(k+1)}`.
    Theoretical {
        floor: f64,
        scale: f64,
    },
    /// `scale/√(k+1)`.
    Practical {
        scale: f64,
    },
    Constant {
        value: f64,
    },
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            StepSchedule::Theoretical { floor, scale } => floor > 0.0 && scale > 0.0,
            StepSchedule::Practical { scale } => scale > 0.0,
            StepSchedule::Constant { value } => value > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "step schedule needs positive parameters: {self:?}"
            )))
        }
    }

    pub fn step_size(&self, k: usize) -> f64 {
        let t = (k + 1) as f64;
        match *self {
            StepSchedule::Theoretical { floor, scale } => floor.min(scale / t),
            StepSchedule::Practical { scale } => scale / t.sqrt(),
            StepSchedule::Constant { value } => value,
        }
    }
}

/// Smallest `k` with `floor ≥ scale/(k+1)`: the round from which the
/// theoretical schedule decays as `scale/(k+1)`.
pub fn diminishing_from(floor: f64, scale: f64) -> usize {
    let mut k = ((scale / floor).ceil() as usize).saturating_sub(1);
    while k > 0 && floor >= scale / k as f64 {
        k -= 1;
    }
    while floor < scale / (k + 1) as f64 {
        k += 1;
    }
    k
}

/// Which update rule regular agents run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    /// Total-variation penalized stochastic subgradient.
    Proposed {
        lambda: f64,
        norm: PenaltyNorm,
    },
    Dpsgd,
    /// Trimmed-mean screening; `trim` defaults to the number of Byzantine agents.
    BridgeS {
        trim: Option<usize>,
    },
}

impl Method {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Method::Proposed { lambda, .. } if !(lambda >= 0.0 && lambda.is_finite()) => Err(
                Error::Config(format!("penalty λ must be ≥ 0, got {lambda}")),
            ),
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Method::Proposed { .. } => "proposed",
            Method::Dpsgd => "dpsgd",
            Method::BridgeS { .. } => "bridge_s",
        }
    }
}

/// A [`Method`] with its defaults filled in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateRule {
    Proposed { lambda: f64, norm: PenaltyNorm },
    Dpsgd,
    Bridge { trim: usize },
}

impl UpdateRule {
    pub fn resolve(method: Method, byzantine_count: usize) -> Result<Self> {
        method.validate()?;
        Ok(match method {
            Method::Proposed { lambda, norm } => UpdateRule::Proposed { lambda, norm },
            Method::Dpsgd => UpdateRule::Dpsgd,
            Method::BridgeS { trim } => UpdateRule::Bridge {
                trim: trim.unwrap_or(byzantine_count),
            },
        })
    }

    /// Applies the rule. The flag is false when a trimmed mean had to fall
    /// back to the plain mean.
    pub fn apply(
        &self,
        x: &[f64],
        inbox: &Inbox<'_>,
        grad_sample: &[f64],
        grad_reg: &[f64],
        step: f64,
    ) -> Result<(ModelVec, bool)> {
        match *self {
            UpdateRule::Proposed { lambda, norm } => {
                proposed_step(x, inbox, grad_sample, grad_reg, lambda, step, norm)
                    .map(|m| (m, true))
            }
            UpdateRule::Dpsgd => {
                dpsgd_step(x, inbox, grad_sample, grad_reg, step).map(|m| (m, true))
            }
            UpdateRule::Bridge { trim } => bridge_step(x, inbox, grad_sample, grad_reg, step, trim)
                .map(|u| (u.model, u.trimmed)),
        }
    }
}
