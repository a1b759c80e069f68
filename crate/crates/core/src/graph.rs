//! Network topologies, time-varying edge schedules and the spectral
//! quantities behind the consensus threshold.
//!
//! Agents are indexed `0..n`. Undirected edges are stored as `(i, j)` with
//! `i < j`. Only edges between two regular agents ("reliable" edges) enter
//! the incidence matrix.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng};

/// Undirected edge `(i, j)` with `i < j`.
pub type Edge = (usize, usize);

/// Relative tolerance below which a singular value counts as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Maximum number of Byzantine placements tried by [`assign_byzantine`].
pub const MAX_ASSIGNMENT_ATTEMPTS: usize = 10_000;

/// Normalizes an unordered pair to `(min, max)`.
pub fn edge(a: usize, b: usize) -> Edge {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Agents, Byzantine labels and the (candidate) undirected edge set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    n: usize,
    byzantine: BTreeSet<usize>,
    edges: BTreeSet<Edge>,
}

impl Topology {
    pub fn new(
        n: usize,
        edges: impl IntoIterator<Item = Edge>,
        byzantine: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i == j {
                return Err(Error::InvalidTopology(format!("self-loop at {i}")));
            }
            if i.max(j) >= n {
                return Err(Error::InvalidTopology(format!(
                    "edge ({i},{j}) out of range for n={n}"
                )));
            }
            if !set.insert(edge(i, j)) {
                return Err(Error::InvalidTopology(format!("duplicate edge ({i},{j})")));
            }
        }
        let byzantine: BTreeSet<usize> = byzantine.into_iter().collect();
        if let Some(&b) = byzantine.iter().find(|&&b| b >= n) {
            return Err(Error::InvalidTopology(format!(
                "Byzantine index {b} out of range for n={n}"
            )));
        }
        if byzantine.len() >= n {
            return Err(Error::InvalidTopology("no regular agents".into()));
        }
        Ok(Topology {
            n,
            byzantine,
            edges: set,
        })
    }

    pub fn complete(n: usize) -> Self {
        let edges = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j)));
        Topology::new(n, edges, []).expect("complete graph is valid")
    }

    pub fn path(n: usize) -> Self {
        Topology::new(n, (1..n).map(|j| (j - 1, j)), []).expect("path graph is valid")
    }

    pub fn cycle(n: usize) -> Self {
        let mut edges: Vec<Edge> = (1..n).map(|j| (j - 1, j)).collect();
        if n > 2 {
            edges.push((0, n - 1));
        }
        Topology::new(n, edges, []).expect("cycle graph is valid")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &BTreeSet<Edge> {
        &self.edges
    }

    pub fn byzantine(&self) -> &BTreeSet<usize> {
        &self.byzantine
    }

    pub fn is_byzantine(&self, agent: usize) -> bool {
        self.byzantine.contains(&agent)
    }

    /// Regular agents in increasing order.
    pub fn regular(&self) -> Vec<usize> {
        (0..self.n)
            .filter(|i| !self.byzantine.contains(i))
            .collect()
    }

    pub fn num_regular(&self) -> usize {
        self.n - self.byzantine.len()
    }

    /// Same agents and edges, new Byzantine set.
    pub fn with_byzantine(&self, byzantine: impl IntoIterator<Item = usize>) -> Result<Self> {
        Topology::new(self.n, self.edges.iter().copied(), byzantine)
    }

    /// Edges with both endpoints regular.
    pub fn reliable_edges(&self) -> Vec<Edge> {
        self.edges
            .iter()
            .copied()
            .filter(|(i, j)| !self.is_byzantine(*i) && !self.is_byzantine(*j))
            .collect()
    }

    /// `(|R_i|, |B_i|)` for agent `i` over the candidate edge set.
    pub fn neighbor_counts(&self, agent: usize) -> (usize, usize) {
        let mut regular = 0;
        let mut byz = 0;
        for &(a, b) in &self.edges {
            let other = if a == agent {
                b
            } else if b == agent {
                a
            } else {
                continue;
            };
            if self.is_byzantine(other) {
                byz += 1;
            } else {
                regular += 1;
            }
        }
        (regular, byz)
    }

    /// Plain-text edge list: `n b` header, one `i j` line per edge, then the
    /// Byzantine indices on the last line (empty when `b = 0`).
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("{} {}\n", self.n, self.byzantine.len());
        for (i, j) in &self.edges {
            let _ = writeln!(out, "{i} {j}");
        }
        let byz: Vec<String> = self.byzantine.iter().map(|b| b.to_string()).collect();
        out.push_str(&byz.join(" "));
        out.push('\n');
        out
    }

    pub fn parse_edge_list(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::InvalidTopology(msg);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty edge list".into()))?;
        let head: Vec<usize> = parse_usizes(header).map_err(bad)?;
        let [n, b] = head[..] else {
            return Err(bad(format!("header must be `n b`, got {header:?}")));
        };
        let mut body: Vec<&str> = lines.collect();
        while body.last().is_some_and(|l| l.trim().is_empty()) {
            body.pop();
        }
        let byzantine = if b > 0 {
            let last = body
                .pop()
                .ok_or_else(|| bad("missing Byzantine index line".into()))?;
            let ids = parse_usizes(last).map_err(bad)?;
            if ids.len() != b {
                return Err(bad(format!(
                    "header declares {b} Byzantine agents, last line lists {}",
                    ids.len()
                )));
            }
            ids
        } else {
            Vec::new()
        };
        let mut edges = Vec::with_capacity(body.len());
        for line in body {
            if line.trim().is_empty() {
                continue;
            }
            let pair = parse_usizes(line).map_err(bad)?;
            let [i, j] = pair[..] else {
                return Err(bad(format!("edge line must be `i j`, got {line:?}")));
            };
            edges.push((i, j));
        }
        let t = Topology::new(n, edges, byzantine.iter().copied())?;
        if t.byzantine.len() != b {
            return Err(bad("duplicate Byzantine index".into()));
        }
        Ok(t)
    }

    pub fn read_edge_list(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Topology::parse_edge_list(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write_edge_list(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_edge_list()).map_err(|e| Error::io(path, e))
    }
}

fn parse_usizes(line: &str) -> std::result::Result<Vec<usize>, String> {
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<usize>()
                .map_err(|_| format!("not a nonnegative integer: {tok:?}"))
        })
        .collect()
}

/// G(n, p) random graph. The Byzantine set is empty.
pub fn gen_erdos_renyi(n: usize, p_edge: f64, seed: u64) -> Result<Topology> {
    if n == 0 {
        return Err(Error::InvalidTopology("n must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&p_edge) {
        return Err(Error::InvalidTopology(format!(
            "edge probability {p_edge} outside [0, 1]"
        )));
    }
    let mut rng = stream_rng(seed, 0);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p_edge {
                edges.push((i, j));
            }
        }
    }
    Topology::new(n, edges, [])
}

/// Marks `b` agents Byzantine uniformly at random. With
/// `require_regular_connected`, placements are resampled until the regular
/// subgraph is connected.
pub fn assign_byzantine(
    t: &Topology,
    b: usize,
    seed: u64,
    require_regular_connected: bool,
) -> Result<Topology> {
    if b >= t.n {
        return Err(Error::InvalidTopology(format!(
            "cannot mark {b} of {} agents Byzantine",
            t.n
        )));
    }
    let attempts = if b == 0 { 1 } else { MAX_ASSIGNMENT_ATTEMPTS };
    for attempt in 0..attempts {
        let mut rng = stream_rng(seed, attempt as u64);
        let chosen = index::sample(&mut rng, t.n, b).into_vec();
        let candidate = t.with_byzantine(chosen)?;
        if !require_regular_connected || regular_subgraph_connected(&candidate) {
            return Ok(candidate);
        }
    }
    Err(Error::AssignmentExhausted { attempts })
}

/// Whether `(R, E_R)` is connected. A single regular agent is connected.
pub fn regular_subgraph_connected(t: &Topology) -> bool {
    regular_connected_over(t, t.edges.iter().copied())
}

/// Connectivity of the regular agents of `t` over an arbitrary edge set;
/// edges touching a Byzantine agent are ignored.
pub fn regular_connected_over(t: &Topology, edges: impl IntoIterator<Item = Edge>) -> bool {
    let regular = t.regular();
    let Some(&start) = regular.first() else {
        return false;
    };
    let mut adj = vec![Vec::new(); t.n];
    for (i, j) in edges {
        if t.is_byzantine(i) || t.is_byzantine(j) {
            continue;
        }
        adj[i].push(j);
        adj[j].push(i);
    }
    let mut seen = vec![false; t.n];
    seen[start] = true;
    let mut queue = VecDeque::from([start]);
    let mut reached = 1;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                reached += 1;
                queue.push_back(v);
            }
        }
    }
    reached == regular.len()
}

/// How the active edge set evolves over iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NetworkSchedule {
    Static(Topology),
    /// Every candidate edge is active in round `k` independently with
    /// probability `p_e`.
    RandomActivation {
        base: Topology,
        prob: BTreeMap<Edge, f64>,
        seed: u64,
    },
    /// Round `k` uses `frames[k mod T]`.
    Periodic {
        base: Topology,
        frames: Vec<BTreeSet<Edge>>,
    },
}

impl NetworkSchedule {
    /// Random activation with the same probability on every candidate edge.
    pub fn random_activation(base: Topology, p: f64, seed: u64) -> Result<Self> {
        let prob = base.edges.iter().map(|&e| (e, p)).collect();
        NetworkSchedule::random_activation_with(base, prob, seed)
    }

    pub fn random_activation_with(
        base: Topology,
        prob: BTreeMap<Edge, f64>,
        seed: u64,
    ) -> Result<Self> {
        for (e, &p) in &prob {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::InvalidSchedule(format!(
                    "activation probability {p} for edge {e:?} outside (0, 1]"
                )));
            }
            if !base.edges.contains(e) {
                return Err(Error::InvalidSchedule(format!(
                    "edge {e:?} is not a candidate edge"
                )));
            }
        }
        if prob.len() != base.edges.len() {
            return Err(Error::InvalidSchedule(
                "every candidate edge needs an activation probability".into(),
            ));
        }
        Ok(NetworkSchedule::RandomActivation { base, prob, seed })
    }

    pub fn periodic(base: Topology, frames: Vec<Vec<Edge>>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidSchedule("period must be at least 1".into()));
        }
        let mut out = Vec::with_capacity(frames.len());
        for frame in frames {
            let mut set = BTreeSet::new();
            for (a, b) in frame {
                let e = edge(a, b);
                if !base.edges.contains(&e) {
                    return Err(Error::InvalidSchedule(format!(
                        "frame edge {e:?} is not a candidate edge"
                    )));
                }
                set.insert(e);
            }
            out.push(set);
        }
        Ok(NetworkSchedule::Periodic { base, frames: out })
    }

    /// The agents, Byzantine labels and candidate edges.
    pub fn topology(&self) -> &Topology {
        match self {
            NetworkSchedule::Static(t) => t,
            NetworkSchedule::RandomActivation { base, .. } => base,
            NetworkSchedule::Periodic { base, .. } => base,
        }
    }

    pub fn is_static(&self) -> bool {
        matches!(self, NetworkSchedule::Static(_))
    }

    /// Active edges in round `k`, sorted. A pure function of `(self, k)`.
    pub fn edges_at(&self, k: usize) -> Vec<Edge> {
        match self {
            NetworkSchedule::Static(t) => t.edges.iter().copied().collect(),
            NetworkSchedule::RandomActivation { prob, seed, .. } => {
                // Counter-based: one ChaCha stream per round.
                let mut rng = stream_rng(derive_seed(*seed, 0), k as u64);
                prob.iter()
                    .filter_map(|(&e, &p)| (rng.random::<f64>() < p).then_some(e))
                    .collect()
            }
            NetworkSchedule::Periodic { frames, .. } => {
                frames[k % frames.len()].iter().copied().collect()
            }
        }
    }

    /// Long-run frequency `ā_e` of every candidate edge, in closed form.
    pub fn average_edge_frequencies(&self) -> BTreeMap<Edge, f64> {
        match self {
            NetworkSchedule::Static(t) => t.edges.iter().map(|&e| (e, 1.0)).collect(),
            NetworkSchedule::RandomActivation { prob, .. } => prob.clone(),
            NetworkSchedule::Periodic { base, frames } => {
                let period = frames.len() as f64;
                base.edges
                    .iter()
                    .map(|e| {
                        let hits = frames.iter().filter(|f| f.contains(e)).count();
                        (*e, hits as f64 / period)
                    })
                    .collect()
            }
        }
    }

    /// `(1/K) Σ_{k<K} ζ_e^k`, measured by replaying the schedule.
    pub fn empirical_edge_frequencies(&self, horizon: usize) -> BTreeMap<Edge, f64> {
        let mut counts: BTreeMap<Edge, usize> =
            self.topology().edges.iter().map(|&e| (e, 0)).collect();
        for k in 0..horizon {
            for e in self.edges_at(k) {
                *counts.get_mut(&e).expect("active edge is a candidate") += 1;
            }
        }
        let horizon = horizon.max(1) as f64;
        counts
            .into_iter()
            .map(|(e, c)| (e, c as f64 / horizon))
            .collect()
    }

    /// Connectivity of the average network: regular agents joined by edges
    /// with `ā_e > 0`.
    pub fn average_network_connected(&self) -> bool {
        let freq = self.average_edge_frequencies();
        regular_connected_over(
            self.topology(),
            freq.into_iter().filter(|&(_, a)| a > 0.0).map(|(e, _)| e),
        )
    }
}

/// Node-edge incidence matrix of the regular subgraph.
#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceMatrix {
    /// `|R| x |E_R|`.
    pub matrix: DMatrix<f64>,
    /// Agent index of each row.
    pub agents: Vec<usize>,
    /// Edge of each column.
    pub edge_order: Vec<Edge>,
}

impl IncidenceMatrix {
    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Incidence matrix over reliable edges: column `e = (i, j)` holds `+w` in
/// row `i` and `-w` in row `j`, with `w = 1` or `w = ā_e` when weights are
/// given. Edges with zero weight are left out.
pub fn incidence_matrix(t: &Topology, weights: Option<&BTreeMap<Edge, f64>>) -> IncidenceMatrix {
    let agents = t.regular();
    let mut row_of = vec![usize::MAX; t.n];
    for (r, &a) in agents.iter().enumerate() {
        row_of[a] = r;
    }
    let columns: Vec<(Edge, f64)> = t
        .reliable_edges()
        .into_iter()
        .map(|e| {
            (
                e,
                weights.map_or(1.0, |w| w.get(&e).copied().unwrap_or(0.0)),
            )
        })
        .filter(|&(_, w)| w > 0.0)
        .collect();
    let mut matrix = DMatrix::zeros(agents.len(), columns.len());
    for (c, &((i, j), w)) in columns.iter().enumerate() {
        matrix[(row_of[i], c)] = w;
        matrix[(row_of[j], c)] = -w;
    }
    IncidenceMatrix {
        matrix,
        agents,
        edge_order: columns.into_iter().map(|(e, _)| e).collect(),
    }
}

/// Smallest singular value above `RANK_TOLERANCE * σ_max`.
pub fn min_nonzero_singular_value(m: &IncidenceMatrix) -> Result<f64> {
    min_nonzero_singular_value_of(&m.matrix)
}

const SVD_MAX_ITERS: usize = 10_000;

/// SVD with a bounded number of sweeps.
pub(crate) fn try_svd(
    m: &DMatrix<f64>,
    vectors: bool,
) -> Result<nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    m.clone()
        .try_svd(vectors, vectors, f64::EPSILON, SVD_MAX_ITERS)
        .ok_or(Error::NoConvergence {
            what: "singular value decomposition",
            iterations: SVD_MAX_ITERS,
            residual: f64::NAN,
        })
}

pub(crate) fn min_nonzero_singular_value_of(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(Error::ZeroMatrix);
    }
    let sv = try_svd(m, false)?.singular_values;
    let max = sv.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    Ok(sv
        .iter()
        .copied()
        .filter(|&s| s > RANK_TOLERANCE * max)
        .fold(f64::INFINITY, f64::min))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;

    fn laplacian_oracle_sigma(m: &DMatrix<f64>) -> f64 {
        // σ² are the eigenvalues of A Aᵀ.
        let gram = m * m.transpose();
        let eig = SymmetricEigen::new(gram);
        let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        eig.eigenvalues
            .iter()
            .copied()
            .filter(|&l| l > 1e-9 * max)
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }

    #[test]
    fn erdos_renyi_extremes() {
        let t = gen_erdos_renyi(2, 1.0, 5).unwrap();
        assert_eq!(t.edges().iter().copied().collect::<Vec<_>>(), vec![(0, 1)]);
        assert!(gen_erdos_renyi(3, 0.0, 5).unwrap().edges().is_empty());
        assert!(t.byzantine().is_empty());
        assert!(gen_erdos_renyi(0, 0.5, 1).is_err());
        assert!(gen_erdos_renyi(3, 1.5, 1).is_err());
    }

    #[test]
    fn erdos_renyi_edge_count_within_binomial_band() {
        let t = gen_erdos_renyi(30, 0.7, 7).unwrap();
        let pairs = 435.0;
        let mean = 0.7 * pairs;
        let sd = (pairs * 0.7 * 0.3_f64).sqrt();
        let count = t.edges().len() as f64;
        assert!((count - mean).abs() < 4.0 * sd, "edges {count}");
        assert_eq!(t, gen_erdos_renyi(30, 0.7, 7).unwrap());
    }

    #[test]
    fn topology_rejects_bad_input() {
        assert!(Topology::new(3, [(1, 1)], []).is_err());
        assert!(Topology::new(3, [(0, 3)], []).is_err());
        assert!(Topology::new(3, [(0, 1), (1, 0)], []).is_err());
        assert!(Topology::new(2, [(0, 1)], [0, 1]).is_err());
        assert!(Topology::new(2, [(0, 1)], [2]).is_err());
        let t = Topology::new(3, [(2, 0)], []).unwrap();
        assert!(t.edges().contains(&(0, 2)));
    }

    #[test]
    fn connectivity_examples() {
        assert!(regular_subgraph_connected(&Topology::complete(3)));
        let path = Topology::path(3).with_byzantine([1]).unwrap();
        assert!(!regular_subgraph_connected(&path));
        let star = Topology::new(5, (1..5).map(|j| (0, j)), [0]).unwrap();
        assert!(!regular_subgraph_connected(&star));
        let single = Topology::new(2, [(0, 1)], [1]).unwrap();
        assert!(regular_subgraph_connected(&single));
    }

    #[test]
    fn assignment_keeps_regulars_connected() {
        let k4 = Topology::complete(4);
        for seed in 0..10 {
            let t = assign_byzantine(&k4, 1, seed, true).unwrap();
            assert_eq!(t.byzantine().len(), 1);
            assert!(regular_subgraph_connected(&t));
        }
        // Marking the middle of a path disconnects its ends.
        let path = Topology::path(3);
        for seed in 0..20 {
            let t = assign_byzantine(&path, 1, seed, true).unwrap();
            assert!(!t.is_byzantine(1));
        }
        let er = gen_erdos_renyi(30, 0.7, 11).unwrap();
        let t = assign_byzantine(&er, 3, 99, true).unwrap();
        assert_eq!(t.byzantine().len(), 3);
        assert!(regular_subgraph_connected(&t));
        assert!(assign_byzantine(&er, 30, 1, true).is_err());
    }

    #[test]
    fn assignment_gives_up_on_hopeless_graphs() {
        let empty = Topology::new(4, [], []).unwrap();
        assert!(matches!(
            assign_byzantine(&empty, 1, 0, true),
            Err(Error::AssignmentExhausted { .. })
        ));
    }

    #[test]
    fn static_and_periodic_edges() {
        let tri = Topology::complete(3);
        let s = NetworkSchedule::Static(tri.clone());
        assert_eq!(s.edges_at(99), vec![(0, 1), (0, 2), (1, 2)]);
        let p = NetworkSchedule::periodic(tri.clone(), vec![vec![(0, 1)], vec![(1, 2)]]).unwrap();
        assert_eq!(p.edges_at(3), vec![(1, 2)]);
        assert_eq!(p.edges_at(4), vec![(0, 1)]);
        assert!(NetworkSchedule::periodic(tri.clone(), vec![]).is_err());
        let path = Topology::path(3);
        assert!(NetworkSchedule::periodic(path, vec![vec![(0, 2)]]).is_err());
    }

    #[test]
    fn random_activation_is_pure_and_matches_probability() {
        let base = Topology::complete(4);
        let s = NetworkSchedule::random_activation(base, 0.5, 17).unwrap();
        assert_eq!(s.edges_at(12), s.edges_at(12));
        let freq = s.empirical_edge_frequencies(10_000);
        for (e, f) in freq {
            assert!((f - 0.5).abs() < 0.05, "edge {e:?} frequency {f}");
        }
        assert!(NetworkSchedule::random_activation(Topology::complete(3), 0.0, 1).is_err());
        assert!(NetworkSchedule::random_activation(Topology::complete(3), 1.1, 1).is_err());
    }

    #[test]
    fn average_frequencies_closed_form() {
        let tri = Topology::complete(3);
        let s = NetworkSchedule::Static(tri.clone());
        assert!(s.average_edge_frequencies().values().all(|&a| a == 1.0));
        let p = NetworkSchedule::periodic(
            tri.clone(),
            vec![vec![(0, 1)], vec![(0, 1), (1, 2)], vec![(0, 2)], vec![]],
        )
        .unwrap();
        let a = p.average_edge_frequencies();
        assert_eq!(a[&(0, 1)], 0.5);
        assert_eq!(a[&(1, 2)], 0.25);
        assert_eq!(a[&(0, 2)], 0.25);
        let r = NetworkSchedule::random_activation(tri, 0.01, 3).unwrap();
        assert!(r.average_edge_frequencies().values().all(|&a| a == 0.01));
    }

    #[test]
    fn average_network_connectivity() {
        let path = Topology::path(3);
        let p = NetworkSchedule::periodic(path.clone(), vec![vec![(0, 1)], vec![(1, 2)]]).unwrap();
        assert!(p.average_network_connected());
        let q = NetworkSchedule::periodic(path, vec![vec![(0, 1)]]).unwrap();
        assert!(!q.average_network_connected());
    }

    #[test]
    fn incidence_examples() {
        let a = incidence_matrix(&Topology::path(2), None);
        assert_eq!(a.matrix.as_slice(), &[1.0, -1.0]);
        let tri = incidence_matrix(&Topology::complete(3), None);
        let expected =
            DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, -1.0, 0.0, 1.0, 0.0, -1.0, -1.0]);
        assert_eq!(tri.matrix, expected);
        assert_eq!(tri.edge_order, vec![(0, 1), (0, 2), (1, 2)]);
        let w = BTreeMap::from([((0, 1), 0.5)]);
        let aw = incidence_matrix(&Topology::path(2), Some(&w));
        assert_eq!(aw.matrix.as_slice(), &[0.5, -0.5]);
    }

    #[test]
    fn incidence_skips_byzantine_edges() {
        let t = Topology::complete(4).with_byzantine([2]).unwrap();
        let a = incidence_matrix(&t, None);
        assert_eq!(a.agents, vec![0, 1, 3]);
        assert_eq!(a.edge_order, vec![(0, 1), (0, 3), (1, 3)]);
        assert_eq!(a.matrix[(2, 1)], -1.0);
    }

    #[test]
    fn singular_value_examples() {
        let two = incidence_matrix(&Topology::path(2), None);
        let s = min_nonzero_singular_value(&two).unwrap();
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
        assert!((s - laplacian_oracle_sigma(&two.matrix)).abs() < 1e-12);

        let tri = incidence_matrix(&Topology::complete(3), None);
        let s = min_nonzero_singular_value(&tri).unwrap();
        let closed = 2.0 * (std::f64::consts::PI / 3.0).sin();
        assert!((s - closed).abs() < 1e-12);
        assert!((s - 3f64.sqrt()).abs() < 1e-12);

        let w = BTreeMap::from([((0, 1), 0.5)]);
        let half = incidence_matrix(&Topology::path(2), Some(&w));
        let s = min_nonzero_singular_value(&half).unwrap();
        assert!((s - 0.5 * 2f64.sqrt()).abs() < 1e-12);
        assert!((s - laplacian_oracle_sigma(&half.matrix)).abs() < 1e-12);
    }

    #[test]
    fn path_and_cycle_spectra() {
        // Path P_n: λ_min(L) = 2 - 2cos(π/n); cycle C_n: 2 - 2cos(2π/n).
        for n in 3..9 {
            let p = incidence_matrix(&Topology::path(n), None);
            let expect = (2.0 - 2.0 * (std::f64::consts::PI / n as f64).cos()).sqrt();
            assert!((min_nonzero_singular_value(&p).unwrap() - expect).abs() < 1e-10);
            let c = incidence_matrix(&Topology::cycle(n), None);
            let expect = (2.0 - 2.0 * (2.0 * std::f64::consts::PI / n as f64).cos()).sqrt();
            assert!((min_nonzero_singular_value(&c).unwrap() - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_matrix_is_an_error() {
        let lonely = Topology::new(2, [], []).unwrap();
        assert!(matches!(
            min_nonzero_singular_value(&incidence_matrix(&lonely, None)),
            Err(Error::ZeroMatrix)
        ));
    }

    #[test]
    fn edge_list_round_trip() {
        let t = Topology::new(5, [(0, 1), (1, 2), (3, 4), (2, 4)], [2, 3]).unwrap();
        let text = t.to_edge_list();
        assert!(text.starts_with("5 2\n0 1\n"));
        assert!(text.ends_with("2 3\n"));
        assert_eq!(Topology::parse_edge_list(&text).unwrap(), t);
        let clean = Topology::path(3);
        assert_eq!(
            Topology::parse_edge_list(&clean.to_edge_list()).unwrap(),
            clean
        );
        assert_eq!(
            Topology::parse_edge_list("2 0\n0 1\n").unwrap(),
            Topology::path(2)
        );
    }

    #[test]
    fn edge_list_errors() {
        assert!(Topology::parse_edge_list("").is_err());
        assert!(Topology::parse_edge_list("3\n").is_err());
        assert!(Topology::parse_edge_list("3 1\n0 1\n").is_err());
        assert!(Topology::parse_edge_list("3 0\n0 x\n").is_err());
        assert!(Topology::parse_edge_list("3 0\n0 1 2\n").is_err());
        assert!(Topology::parse_edge_list("3 2\n0 1\n1 1\n").is_err());
    }

    fn union_find_connected(t: &Topology) -> bool {
        fn find(p: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            p[x] = r;
            r
        }
        let mut parent: Vec<usize> = (0..t.n()).collect();
        for (i, j) in t.reliable_edges() {
            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
            parent[a] = b;
        }
        let regular = t.regular();
        let Some(&first) = regular.first() else {
            return false;
        };
        let root = find(&mut parent, first);
        regular.iter().all(|&r| find(&mut parent, r) == root)
    }

    #[test]
    fn connectivity_matches_union_find() {
        let mut disconnected = 0;
        for seed in 0..1000u64 {
            let n = 2 + (seed % 9) as usize;
            let p = 0.1 + 0.08 * (seed % 10) as f64;
            let base = gen_erdos_renyi(n, p, seed).unwrap();
            let b = (seed % 3) as usize % n;
            let byz: Vec<usize> = (0..b).map(|k| (k * 3 + seed as usize) % n).collect();
            let t = base.with_byzantine(byz).unwrap();
            let expect = union_find_connected(&t);
            disconnected += usize::from(!expect);
            assert_eq!(regular_subgraph_connected(&t), expect, "seed {seed}");
        }
        assert!(disconnected > 50);
    }

    proptest::proptest! {
        #[test]
        fn incidence_columns_sum_to_zero_and_rank(n in 2usize..9, p in 0.2f64..1.0, seed in 0u64..10_000) {
            let t = gen_erdos_renyi(n, p, seed).unwrap();
            let m = incidence_matrix(&t, None);
            for c in 0..m.cols() {
                proptest::prop_assert_eq!(m.matrix.column(c).sum(), 0.0);
                proptest::prop_assert_eq!(m.matrix.column(c).iter().filter(|v| **v != 0.0).count(), 2);
            }
            if regular_subgraph_connected(&t) && m.cols() > 0 {
                let sv = try_svd(&m.matrix, false).unwrap().singular_values;
                let max = sv.iter().copied().fold(0.0, f64::max);
                let rank = sv.iter().filter(|&&s| s > RANK_TOLERANCE * max).count();
                proptest::prop_assert_eq!(rank, t.num_regular() - 1);
            }
        }
    }
}
