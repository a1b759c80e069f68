//! Consensus thresholds, theoretical constants, an exact solver for the
//! penalized problem on quadratics, and the sign certificate.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::algorithms::{diminishing_from, PenaltyNorm};
use crate::engine::MetricsLog;
use crate::error::{Error, Result};
use crate::graph::{
    incidence_matrix, min_nonzero_singular_value, regular_connected_over, try_svd, Edge, Topology,
    RANK_TOLERANCE,
};
use crate::model::ModelVec;
use crate::objectives::{global_optimum, Constants, LocalObjective, QuadraticObjective};

/// Accuracy of [`solve_penalized_exact`]: every coordinate slice of the
/// returned stack is within this Euclidean distance of the true minimizer.
pub const PENALIZED_TOLERANCE: f64 = 1e-6;

const PENALIZED_MAX_ITERS: usize = 2_000_000;

/// Relative tolerance on `Σ_i v_i = 0` in [`sign_certificate`].
pub const OPTIMALITY_TOLERANCE: f64 = 1e-8;

fn reliable_weighted_edges(
    t: &Topology,
    weights: Option<&BTreeMap<Edge, f64>>,
) -> Vec<(Edge, f64)> {
    t.reliable_edges()
        .into_iter()
        .map(|e| {
            (
                e,
                weights.map_or(1.0, |w| w.get(&e).copied().unwrap_or(0.0)),
            )
        })
        .filter(|&(_, w)| w > 0.0)
        .collect()
}

fn check_connected(t: &Topology, weights: Option<&BTreeMap<Edge, f64>>) -> Result<()> {
    let edges = reliable_weighted_edges(t, weights)
        .into_iter()
        .map(|(e, _)| e);
    if regular_connected_over(t, edges) {
        Ok(())
    } else {
        Err(Error::Disconnected)
    }
}

/// Smallest penalty for which the penalized minimizer is the consensual
/// Byzantine-free optimum:
/// `√|R| / σ̃_min(A) · max_i ‖∇E F_i(x_ref) + ∇f₀(x_ref)‖_∞`.
///
/// `objectives` belong to the regular agents in increasing index order.
/// With `weights` (long-run edge frequencies) the weighted incidence matrix
/// is used. A single regular agent needs no penalty, so the result is 0.
pub fn lambda_zero(
    t: &Topology,
    weights: Option<&BTreeMap<Edge, f64>>,
    objectives: &[&dyn LocalObjective],
    x_ref: &[f64],
) -> Result<f64> {
    let regular = t.num_regular();
    if objectives.len() != regular {
        return Err(Error::DimensionMismatch {
            expected: regular,
            actual: objectives.len(),
        });
    }
    check_connected(t, weights)?;
    if regular == 1 {
        return Ok(0.0);
    }
    let sigma = min_nonzero_singular_value(&incidence_matrix(t, weights))?;
    let worst = objectives
        .iter()
        .map(|o| o.full_gradient(x_ref).norm_inf())
        .fold(0.0, f64::max);
    Ok((regular as f64).sqrt() / sigma * worst)
}

/// Per-agent inputs to the theoretical constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentTerms {
    pub constants: Constants,
    /// `|R_i|`: regular neighbors (all possible ones for time-varying graphs).
    pub regular_neighbors: usize,
    /// `|B_i|`.
    pub byzantine_neighbors: usize,
}

/// Constants of the convergence bounds for one instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryBundle {
    pub lambda: f64,
    pub lambda_zero: f64,
    pub epsilon: f64,
    pub eta: f64,
    /// Step floor `α̲`.
    pub alpha_floor: f64,
    /// Step scale `ᾱ`.
    pub alpha_scale: f64,
    pub k0: usize,
    pub delta0: f64,
    pub delta2: f64,
    pub delta4: f64,
    pub delta6: f64,
}

impl TheoryBundle {
    /// Radius `ᾱΔ₂` of the static-graph neighborhood.
    pub fn static_bound(&self) -> f64 {
        self.alpha_scale * self.delta2
    }

    /// Radius `ᾱΔ₆` of the time-varying neighborhood.
    pub fn time_varying_bound(&self) -> f64 {
        self.alpha_scale * self.delta6
    }

    /// `Δ₁` given the measured `E‖x^{k₀} − x*‖²`.
    pub fn delta1(&self, dist_sq_at_k0: f64) -> f64 {
        self.transient(self.delta0, dist_sq_at_k0)
    }

    /// `Δ₅` given the measured `E‖x^{k₀} − x*‖²`.
    pub fn delta5(&self, dist_sq_at_k0: f64) -> f64 {
        self.transient(self.delta4, dist_sq_at_k0)
    }

    fn transient(&self, delta: f64, dist_sq_at_k0: f64) -> f64 {
        let a = self.alpha_scale;
        let k0 = (self.k0 + 1) as f64;
        let first = a * a * delta / (self.eta * a - 1.0);
        let second = k0 * dist_sq_at_k0 + a * a * delta / k0;
        first.max(second)
    }
}

/// Evaluates `η, α̲, k₀, Δ₀, Δ₂, Δ₄, Δ₆` for penalty `lambda`, step scale
/// `alpha_scale` and model dimension `dim`.
///
/// `epsilon` defaults to half of `min_i 2u_iL_i/(u_i+L_i)`. `lambda_zero`
/// is copied into the bundle as given.
pub fn theory_constants(
    agents: &[AgentTerms],
    lambda: f64,
    lambda_zero: f64,
    epsilon: Option<f64>,
    alpha_scale: f64,
    dim: usize,
) -> Result<TheoryBundle> {
    if agents.is_empty() {
        return Err(Error::Config("no regular agents".into()));
    }
    let contraction = agents
        .iter()
        .map(|a| {
            let (u, l) = (a.constants.strong_convexity, a.constants.smoothness);
            2.0 * u * l / (u + l)
        })
        .fold(f64::INFINITY, f64::min);
    let epsilon = epsilon.unwrap_or(contraction / 2.0);
    let eta = contraction - epsilon;
    if !(epsilon > 0.0 && eta > 0.0) {
        return Err(Error::Config(format!(
            "slack ε = {epsilon} must lie in (0, {contraction})"
        )));
    }
    if !(alpha_scale > 1.0 / eta) {
        return Err(Error::Config(format!(
            "step scale {alpha_scale} must exceed 1/η = {}",
            1.0 / eta
        )));
    }
    let alpha_floor = agents
        .iter()
        .map(|a| 1.0 / (4.0 * (a.constants.strong_convexity + a.constants.smoothness)))
        .fold(f64::INFINITY, f64::min);
    let l2 = lambda * lambda;
    let p = dim as f64;
    let (mut delta0, mut delta2, mut delta6) = (0.0, 0.0, 0.0);
    for a in agents {
        let r = a.regular_neighbors as f64;
        let b = a.byzantine_neighbors as f64;
        let noise = a.constants.noise_bound;
        delta0 += 32.0 * l2 * r * r * p + 4.0 * l2 * b * b * p + 2.0 * noise * noise;
        delta2 += l2 * b * b * p / epsilon;
        delta6 += 2.0 * l2 * b * b * p / epsilon + 8.0 * l2 * r * r * p / epsilon;
    }
    Ok(TheoryBundle {
        lambda,
        lambda_zero,
        epsilon,
        eta,
        alpha_floor,
        alpha_scale,
        k0: diminishing_from(alpha_floor, alpha_scale),
        delta0,
        delta2,
        delta4: delta0,
        delta6,
    })
}

/// [`theory_constants`] for a topology and the regular agents' objectives,
/// with `λ₀` computed at the pooled optimum. Neighbor counts come from the
/// candidate edge set.
pub fn theory_for_instance(
    t: &Topology,
    weights: Option<&BTreeMap<Edge, f64>>,
    objectives: &[&dyn LocalObjective],
    lambda: f64,
    epsilon: Option<f64>,
    alpha_scale: f64,
) -> Result<TheoryBundle> {
    let optimum = global_optimum(objectives)?;
    let lambda0 = lambda_zero(t, weights, objectives, &optimum)?;
    let agents = t
        .regular()
        .into_iter()
        .zip(objectives)
        .map(|(i, o)| {
            let constants = o.constants().ok_or_else(|| {
                Error::Config(format!("objective of agent {i} declares no constants"))
            })?;
            let (regular_neighbors, byzantine_neighbors) = t.neighbor_counts(i);
            Ok(AgentTerms {
                constants,
                regular_neighbors,
                byzantine_neighbors,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    theory_constants(
        &agents,
        lambda,
        lambda0,
        epsilon,
        alpha_scale,
        optimum.dim(),
    )
}

/// Minimizer of `Σ_i c_i/2 ‖x_i − b_i‖² + λ Σ_e w_e ‖x_i − x_j‖₁` over the
/// regular agents, with `w_e = 1` or the given edge weights.
///
/// Each coordinate is solved separately through its box-constrained dual
/// (accelerated projected gradient with adaptive restart). The duality gap
/// certifies the result to [`PENALIZED_TOLERANCE`].
pub fn solve_penalized_exact(
    quads: &[QuadraticObjective],
    t: &Topology,
    weights: Option<&BTreeMap<Edge, f64>>,
    lambda: f64,
    norm: PenaltyNorm,
) -> Result<Vec<ModelVec>> {
    if norm != PenaltyNorm::L1 {
        return Err(Error::Config(
            "the exact solver handles the ℓ1 penalty only".into(),
        ));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!(
            "penalty λ must be ≥ 0, got {lambda}"
        )));
    }
    let regular = t.regular();
    if quads.len() != regular.len() {
        return Err(Error::DimensionMismatch {
            expected: regular.len(),
            actual: quads.len(),
        });
    }
    let dim = quads[0].target.dim();
    if let Some(q) = quads.iter().find(|q| q.target.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: q.target.dim(),
        });
    }
    let mut row_of = vec![usize::MAX; t.n()];
    for (r, &a) in regular.iter().enumerate() {
        row_of[a] = r;
    }
    let edges: Vec<(usize, usize, f64)> = reliable_weighted_edges(t, weights)
        .into_iter()
        .map(|((i, j), w)| (row_of[i], row_of[j], w))
        .collect();
    let curv: Vec<f64> = quads.iter().map(|q| q.curvature).collect();
    let mut out = vec![ModelVec::zeros(dim); quads.len()];
    for d in 0..dim {
        let b: Vec<f64> = quads.iter().map(|q| q.target[d]).collect();
        let x = solve_coordinate(&b, &curv, &edges, lambda)?;
        for (slot, v) in out.iter_mut().zip(x) {
            slot[d] = v;
        }
    }
    Ok(out)
}

struct DualProblem<'a> {
    b: &'a [f64],
    c: &'a [f64],
    edges: &'a [(usize, usize, f64)],
    lambda: f64,
}

impl DualProblem<'_> {
    /// Primal point `x(s) = b − λ C⁻¹ D s`.
    fn primal(&self, s: &[f64], x: &mut [f64]) {
        x.copy_from_slice(self.b);
        for (&(i, j, w), &se) in self.edges.iter().zip(s) {
            x[i] -= self.lambda * w * se / self.c[i];
            x[j] += self.lambda * w * se / self.c[j];
        }
    }

    /// `λ Σ_e w_e (|Δ_e| − s_e Δ_e)`: primal minus dual objective, computed
    /// without cancellation.
    fn gap(&self, s: &[f64], x: &[f64]) -> f64 {
        self.lambda
            * self
                .edges
                .iter()
                .zip(s)
                .map(|(&(i, j, w), &se)| {
                    let diff = x[i] - x[j];
                    w * (diff.abs() - se * diff)
                })
                .sum::<f64>()
    }

    /// Dual objective `½‖λ C^{-½} D s‖² − λ bᵀ D s` (to be minimized).
    fn value(&self, x: &[f64]) -> f64 {
        // With r = x − b = −λC⁻¹Ds: ½ Σ c r² − λ bᵀDs = ½ Σ c r² + Σ c b r.
        x.iter()
            .zip(self.b)
            .zip(self.c)
            .map(|((&xi, &bi), &ci)| {
                let r = xi - bi;
                0.5 * ci * r * r + ci * bi * r
            })
            .sum()
    }
}

const POLISH_EVERY: usize = 200;

/// Tolerance on the edge signs rebuilt by [`DualProblem::polish`].
const SIGN_SLACK: f64 = 1e-9;

impl DualProblem<'_> {
    /// Guesses the fused clusters from `x` (edges shorter than `fuse`),
    /// solves the cluster values exactly and certifies them by rebuilding
    /// intra-cluster edge signs in `[−1, 1]`. Returns `None` when the guess
    /// is not optimal.
    fn polish(&self, s: &[f64], x: &[f64], fuse: f64) -> Option<Vec<f64>> {
        let n = self.b.len();
        let mut root: Vec<usize> = (0..n).collect();
        fn find(root: &mut [usize], mut a: usize) -> usize {
            while root[a] != a {
                root[a] = root[root[a]];
                a = root[a];
            }
            a
        }
        for &(i, j, _) in self.edges {
            if (x[i] - x[j]).abs() <= fuse {
                let (ri, rj) = (find(&mut root, i), find(&mut root, j));
                root[ri] = rj;
            }
        }
        let cluster: Vec<usize> = (0..n).map(|i| find(&mut root, i)).collect();

        // Net cross-cluster force on each agent, λ Σ_e D_ie σ_e.
        let mut force = vec![0.0; n];
        let mut cross_signs = Vec::new();
        for (e, &(i, j, w)) in self.edges.iter().enumerate() {
            if cluster[i] != cluster[j] {
                let sign = if x[i] > x[j] { 1.0 } else { -1.0 };
                force[i] += self.lambda * w * sign;
                force[j] -= self.lambda * w * sign;
                cross_signs.push((e, sign));
            }
        }
        let mut num = vec![0.0; n];
        let mut den = vec![0.0; n];
        for i in 0..n {
            num[cluster[i]] += self.c[i] * self.b[i] - force[i];
            den[cluster[i]] += self.c[i];
        }
        let value: Vec<f64> = (0..n).map(|i| num[cluster[i]] / den[cluster[i]]).collect();
        for &(e, sign) in &cross_signs {
            let (i, j, _) = self.edges[e];
            let diff = value[i] - value[j];
            if diff * sign <= 0.0 {
                return None;
            }
        }

        // Intra-cluster signs must solve λ D_C s_C = −(c(x − b) + force).
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
        for i in 0..n {
            members[cluster[i]].push(i);
        }
        for (rep, group) in members.iter().enumerate() {
            let inner: Vec<usize> = (0..self.edges.len())
                .filter(|&e| {
                    let (i, j, _) = self.edges[e];
                    cluster[i] == rep && cluster[j] == rep
                })
                .collect();
            if inner.is_empty() {
                continue;
            }
            let row = |a: usize| {
                group
                    .iter()
                    .position(|&g| g == a)
                    .expect("member of cluster")
            };
            let mut d = DMatrix::zeros(group.len(), inner.len());
            for (col, &e) in inner.iter().enumerate() {
                let (i, j, w) = self.edges[e];
                d[(row(i), col)] = w;
                d[(row(j), col)] = -w;
            }
            let target = DVector::from_iterator(
                group.len(),
                group
                    .iter()
                    .map(|&a| -(self.c[a] * (value[a] - self.b[a]) + force[a]) / self.lambda),
            );
            let start = DVector::from_iterator(inner.len(), inner.iter().map(|&e| s[e]));
            // Minimum-norm correction D†q = Dᵀ(DDᵀ + J/m)⁻¹q; the cluster is
            // connected by its fused edges and q sums to zero.
            let m = group.len() as f64;
            let shifted =
                &d * d.transpose() + DMatrix::from_element(group.len(), group.len(), 1.0 / m);
            let q = &target - &d * &start;
            let y = shifted.lu().solve(&q)?;
            let signs = &start + d.transpose() * y;
            let residual = (&d * &signs - &target).amax();
            if residual > SIGN_SLACK * (1.0 + target.amax()) || signs.amax() > 1.0 + SIGN_SLACK {
                return None;
            }
        }
        Some(value)
    }
}

fn solve_coordinate(
    b: &[f64],
    c: &[f64],
    edges: &[(usize, usize, f64)],
    lambda: f64,
) -> Result<Vec<f64>> {
    if lambda == 0.0 || edges.is_empty() {
        return Ok(b.to_vec());
    }
    let problem = DualProblem {
        b,
        c,
        edges,
        lambda,
    };
    let c_min = c.iter().copied().fold(f64::INFINITY, f64::min);
    let mut load = vec![0.0; b.len()];
    for &(i, j, w) in edges {
        load[i] += w * w;
        load[j] += w * w;
    }
    let lipschitz = lambda * lambda * 2.0 * load.iter().copied().fold(0.0, f64::max) / c_min;
    let target_gap = 0.5 * c_min * PENALIZED_TOLERANCE * PENALIZED_TOLERANCE;

    let m = edges.len();
    let mut s = vec![0.0; m];
    let mut y = s.clone();
    let mut s_next = s.clone();
    let mut x = vec![0.0; b.len()];
    let mut momentum = 1.0_f64;
    problem.primal(&s, &mut x);
    let mut value = problem.value(&x);
    let mut gap = problem.gap(&s, &x);
    for iter in 0..PENALIZED_MAX_ITERS {
        if gap <= target_gap {
            return Ok(x);
        }
        if iter % POLISH_EVERY == POLISH_EVERY - 1 {
            let radius = (2.0 * gap / c_min).sqrt();
            if let Some(exact) = problem.polish(&s, &x, 4.0 * radius) {
                return Ok(exact);
            }
        }
        problem.primal(&y, &mut x);
        // ∇_s = −λ w_e (x_i − x_j) at y.
        for (e, &(i, j, w)) in edges.iter().enumerate() {
            let g = -lambda * w * (x[i] - x[j]);
            s_next[e] = (y[e] - g / lipschitz).clamp(-1.0, 1.0);
        }
        problem.primal(&s_next, &mut x);
        let next_value = problem.value(&x);
        if next_value > value {
            // Restart from the last accepted point.
            momentum = 1.0;
            y.copy_from_slice(&s);
            problem.primal(&s, &mut x);
            continue;
        }
        let m_next = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
        let beta = (momentum - 1.0) / m_next;
        for e in 0..m {
            y[e] = s_next[e] + beta * (s_next[e] - s[e]);
        }
        s.copy_from_slice(&s_next);
        momentum = m_next;
        value = next_value;
        gap = problem.gap(&s, &x);
    }
    Err(Error::NoConvergence {
        what: "penalized solver",
        iterations: PENALIZED_MAX_ITERS,
        residual: gap,
    })
}

/// Least-squares edge signs `s = −A†v/λ` for every coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignCertificate {
    /// `signs[e][d]` for column `e` of the incidence matrix.
    pub signs: Vec<ModelVec>,
    pub edge_order: Vec<Edge>,
    /// `‖s‖_∞`.
    pub max_abs: f64,
    /// `‖s‖_∞ ≤ 1`: the consensual stack satisfies the penalized optimality
    /// condition.
    pub valid: bool,
}

/// Solves `λ A s + v = 0` in the least-squares sense, where `v[i]` is the
/// full gradient of regular agent `i` (increasing index order) at the
/// pooled optimum.
pub fn sign_certificate(
    t: &Topology,
    weights: Option<&BTreeMap<Edge, f64>>,
    v: &[ModelVec],
    lambda: f64,
) -> Result<SignCertificate> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!(
            "certificate needs λ > 0, got {lambda}"
        )));
    }
    let regular = t.num_regular();
    if v.len() != regular {
        return Err(Error::DimensionMismatch {
            expected: regular,
            actual: v.len(),
        });
    }
    check_connected(t, weights)?;
    let dim = v.first().map_or(0, ModelVec::dim);
    for d in 0..dim {
        let sum: f64 = v.iter().map(|vi| vi[d]).sum();
        let scale: f64 = v.iter().map(|vi| vi[d].abs()).sum();
        if sum.abs() > OPTIMALITY_TOLERANCE * (1.0 + scale) {
            return Err(Error::NotOptimal(sum));
        }
    }
    let inc = incidence_matrix(t, weights);
    if inc.cols() == 0 {
        return Ok(SignCertificate {
            signs: Vec::new(),
            edge_order: Vec::new(),
            max_abs: 0.0,
            valid: true,
        });
    }
    let pinv = pseudo_inverse(&inc.matrix)?;
    let mut signs = vec![ModelVec::zeros(dim); inc.cols()];
    for d in 0..dim {
        let rhs = DVector::from_iterator(regular, v.iter().map(|vi| vi[d]));
        let s = -(&pinv * rhs) / lambda;
        for (e, val) in s.iter().enumerate() {
            signs[e][d] = *val;
        }
    }
    let max_abs = signs.iter().map(ModelVec::norm_inf).fold(0.0, f64::max);
    Ok(SignCertificate {
        signs,
        edge_order: inc.edge_order,
        max_abs,
        valid: max_abs <= 1.0,
    })
}

fn pseudo_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = try_svd(m, true)?;
    let max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    Ok(svd
        .pseudo_inverse(RANK_TOLERANCE * max)
        .expect("both factors were computed"))
}

/// Outcome of comparing measured plateaus with a neighborhood radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodReport {
    /// Mean of `dist_sq` over the last 10% of each run.
    pub plateaus: Vec<f64>,
    pub mean: f64,
    pub standard_error: f64,
    pub bound: f64,
    /// `3 · standard_error`.
    pub slack: f64,
    pub pass: bool,
}

/// Fraction of rounds, counted from the end, averaged into a plateau.
pub const TAIL_FRACTION: f64 = 0.1;

/// Mean of the records of `log` with `k ≥ (1 − TAIL_FRACTION)·k_last`.
pub fn tail_mean(
    log: &MetricsLog,
    metric: impl Fn(&crate::engine::MetricsRecord) -> Option<f64>,
) -> Option<f64> {
    let last = log.records.last()?.k;
    let start = ((1.0 - TAIL_FRACTION) * last as f64).ceil() as usize;
    let vals: Vec<f64> = log
        .records
        .iter()
        .filter(|r| r.k >= start)
        .filter_map(metric)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Checks that the seed-averaged tail `dist_sq` stays within `bound` plus
/// three standard errors.
pub fn verify_neighborhood(logs: &[MetricsLog], bound: f64) -> Result<NeighborhoodReport> {
    let plateaus = logs
        .iter()
        .map(|l| {
            tail_mean(l, |r| r.dist_sq)
                .ok_or_else(|| Error::Config("log has no distance records".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    if plateaus.is_empty() {
        return Err(Error::Config("no logs to verify".into()));
    }
    let n = plateaus.len() as f64;
    let mean = plateaus.iter().sum::<f64>() / n;
    let standard_error = if plateaus.len() > 1 {
        let var = plateaus.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    let slack = 3.0 * standard_error;
    Ok(NeighborhoodReport {
        pass: mean <= bound + slack,
        plateaus,
        mean,
        standard_error,
        bound,
        slack,
    })
}
