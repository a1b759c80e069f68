//! Round-synchronous simulation driver.
//!
//! Round `k`: realize the active edges, let Byzantine agents craft messages
//! from the round-`k` snapshot, update every regular agent, commit all new
//! models at once. Each agent samples from its own RNG stream, so the
//! parallel and sequential paths give bitwise identical results.

use std::borrow::Cow;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algorithms::{Inbox, Method, StepSchedule, UpdateRule};
use crate::analysis::solve_penalized_exact;
use crate::attacks::{craft_message, Attack, AttackSpec, OmniscientView};
use crate::error::{Error, Result};
use crate::graph::{
    assign_byzantine, edge, gen_erdos_renyi, regular_subgraph_connected, Edge, NetworkSchedule,
    Topology,
};
use crate::model::ModelVec;
use crate::objectives::{
    accuracy, global_optimum, load_mnist_dir, partition, Dataset, LocalObjective, PartitionMode,
    QuadraticObjective, SoftmaxObjective, DEFAULT_BATCH_SIZE,
};
use crate::rng::{derive_seed, stream, stream_rng, SimRng};

/// Where the candidate graph comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphSpec {
    ErdosRenyi {
        n: usize,
        p: f64,
    },
    Complete {
        n: usize,
    },
    Path {
        n: usize,
    },
    Cycle {
        n: usize,
    },
    Explicit {
        n: usize,
        edges: Vec<Edge>,
    },
    /// Edge-list file; its Byzantine line is used unless overridden.
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ByzantineSpec {
    /// Keep the labels of the graph source (none for generated graphs).
    #[default]
    AsGiven,
    /// Draw `count` agents, resampling until the regular agents stay connected.
    Random {
        count: usize,
    },
    Fixed {
        agents: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dynamics {
    #[default]
    Static,
    /// Every candidate edge is active with probability `p` in each round.
    RandomActivation {
        p: f64,
    },
    Periodic {
        frames: Vec<Vec<Edge>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub graph: GraphSpec,
    #[serde(default)]
    pub byzantine: ByzantineSpec,
    #[serde(default)]
    pub dynamics: Dynamics,
    /// Skip the connectivity precondition.
    #[serde(default)]
    pub waive_connectivity: bool,
}

/// Targets `b_i` of quadratic objectives, one per agent (Byzantine included).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetSpec {
    Explicit {
        values: Vec<Vec<f64>>,
    },
    /// Coordinates drawn uniformly from `[center − spread, center + spread]`.
    Uniform {
        center: f64,
        spread: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    /// IDX files in `dir`.
    Mnist {
        dir: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    /// Gaussian blobs, split into `train` and `test` samples.
    Synthetic {
        classes: usize,
        feature_dim: usize,
        train: usize,
        test: usize,
        separation: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionSpec {
    #[default]
    Iid,
    PerDigitGroups,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    Quadratic {
        dim: usize,
        targets: TargetSpec,
        curvature: f64,
        noise_std: f64,
    },
    Softmax {
        data: DataSpec,
        #[serde(default)]
        partition: PartitionSpec,
        #[serde(default = "default_batch")]
        batch_size: usize,
    },
}

fn default_batch() -> usize {
    DEFAULT_BATCH_SIZE
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitSpec {
    #[default]
    Zeros,
    Constant {
        value: f64,
    },
    Gaussian {
        std: f64,
    },
}

/// Point that `dist_sq` is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSpec {
    /// `Pooled` for quadratic tasks, `None` otherwise.
    #[default]
    Auto,
    /// The Byzantine-free optimum `x̃*`, repeated for every regular agent.
    Pooled,
    /// Exact minimizer of the penalized problem (quadratics, ℓ1 penalty).
    Penalized,
    None,
}

/// How Byzantine agents maintain the true model some attacks rely on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrueModelRule {
    /// Run the configured update rule on honest messages.
    #[default]
    Protocol,
    /// Plain local SGD on the agent's own data.
    LocalSgd,
}

/// A complete, self-describing run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub network: NetworkSpec,
    pub task: TaskSpec,
    #[serde(default = "no_attack")]
    pub attack: AttackSpec,
    pub method: Method,
    pub step: StepSchedule,
    pub iterations: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default)]
    pub reference: ReferenceSpec,
    #[serde(default)]
    pub true_model: TrueModelRule,
    pub seed: u64,
}

fn no_attack() -> AttackSpec {
    AttackSpec::None
}

pub const DEFAULT_EVAL_EVERY: usize = 10;

fn default_eval_every() -> usize {
    DEFAULT_EVAL_EVERY
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.attack.validate()?;
        self.method.validate()?;
        self.step.validate()?;
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        match &self.task {
            TaskSpec::Quadratic {
                dim,
                curvature,
                noise_std,
                ..
            } => {
                if *dim == 0 || !(*curvature > 0.0) || !(*noise_std >= 0.0) {
                    return Err(Error::Config(
                        "quadratic task needs dim ≥ 1, curvature > 0, noise ≥ 0".into(),
                    ));
                }
            }
            TaskSpec::Softmax { batch_size, .. } => {
                if *batch_size == 0 {
                    return Err(Error::Config("batch size must be positive".into()));
                }
            }
        }
        if let Dynamics::RandomActivation { p } = self.network.dynamics {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Config(format!(
                    "activation probability {p} outside (0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// One evaluation point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Completed rounds.
    pub k: usize,
    pub consensus_variance: f64,
    pub dist_sq: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsLog {
    pub records: Vec<MetricsRecord>,
}

pub const CSV_HEADER: &str = "k,consensus_variance,dist_sq,accuracy";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

impl MetricsLog {
    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:?},{},{}",
                r.k,
                r.consensus_variance,
                fmt_opt(r.dist_sq),
                fmt_opt(r.accuracy)
            );
        }
        out
    }

    pub fn parse_csv(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == CSV_HEADER => {}
            other => return Err(format!("expected header {CSV_HEADER:?}, found {other:?}")),
        }
        let opt = |s: &str| -> std::result::Result<Option<f64>, String> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|e| format!("{s:?}: {e}"))
            }
        };
        let mut records = Vec::new();
        for (no, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(format!("line {}: expected 4 fields", no + 2));
            }
            records.push(MetricsRecord {
                k: fields[0]
                    .parse()
                    .map_err(|e| format!("line {}: {e}", no + 2))?,
                consensus_variance: fields[1]
                    .parse()
                    .map_err(|e| format!("line {}: {e}", no + 2))?,
                dist_sq: opt(fields[2])?,
                accuracy: opt(fields[3])?,
            });
        }
        Ok(MetricsLog { records })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        MetricsLog::parse_csv(&text).map_err(|m| Error::format(path, m))
    }
}

/// `(1/|R|) Σ_i ‖x_i − x̄‖²`, with `x̄` the coordinate-wise mean.
pub fn consensus_variance(models: &[ModelVec]) -> f64 {
    let Some(first) = models.first() else {
        return 0.0;
    };
    let n = models.len() as f64;
    let mut mean = ModelVec::zeros(first.dim());
    for m in models {
        mean.axpy(1.0 / n, m);
    }
    models.iter().map(|m| m.dist_sq(&mean)).sum::<f64>() / n
}

/// `Σ_i ‖x_i − ref‖²`.
pub fn dist_sq_to(models: &[ModelVec], reference: &[f64]) -> f64 {
    models.iter().map(|m| m.dist_sq(reference)).sum()
}

/// `Σ_i ‖x_i − ref_i‖²` against a stacked reference.
pub fn dist_sq_stack(models: &[ModelVec], reference: &[ModelVec]) -> f64 {
    models
        .iter()
        .zip(reference)
        .map(|(m, r)| m.dist_sq(r))
        .sum()
}

fn build_topology(spec: &NetworkSpec, seed: u64) -> Result<Topology> {
    let base = match &spec.graph {
        GraphSpec::ErdosRenyi { n, p } => {
            gen_erdos_renyi(*n, *p, derive_seed(seed, stream::GRAPH))?
        }
        GraphSpec::Complete { n } => Topology::complete(*n),
        GraphSpec::Path { n } => Topology::path(*n),
        GraphSpec::Cycle { n } => Topology::cycle(*n),
        GraphSpec::Explicit { n, edges } => {
            Topology::new(*n, edges.iter().map(|&(a, b)| edge(a, b)), [])?
        }
        GraphSpec::File { path } => Topology::read_edge_list(path)?,
    };
    match &spec.byzantine {
        ByzantineSpec::AsGiven => Ok(base),
        ByzantineSpec::Fixed { agents } => base.with_byzantine(agents.iter().copied()),
        ByzantineSpec::Random { count } => assign_byzantine(
            &base.with_byzantine([])?,
            *count,
            derive_seed(seed, stream::BYZANTINE),
            !spec.waive_connectivity,
        ),
    }
}

fn build_schedule(spec: &NetworkSpec, t: Topology, seed: u64) -> Result<NetworkSchedule> {
    match &spec.dynamics {
        Dynamics::Static => Ok(NetworkSchedule::Static(t)),
        Dynamics::RandomActivation { p } => {
            NetworkSchedule::random_activation(t, *p, derive_seed(seed, stream::EDGES))
        }
        Dynamics::Periodic { frames } => NetworkSchedule::periodic(t, frames.clone()),
    }
}

struct Task {
    objectives: Vec<Arc<dyn LocalObjective>>,
    eval_data: Option<Arc<Dataset>>,
}

fn build_task(spec: &TaskSpec, n: usize, seed: u64) -> Result<Task> {
    match spec {
        TaskSpec::Quadratic {
            dim,
            targets,
            curvature,
            noise_std,
        } => {
            let values: Vec<Vec<f64>> = match targets {
                TargetSpec::Explicit { values } => {
                    if values.len() != n {
                        return Err(Error::Config(format!(
                            "{} targets for {n} agents",
                            values.len()
                        )));
                    }
                    if let Some(v) = values.iter().find(|v| v.len() != *dim) {
                        return Err(Error::DimensionMismatch {
                            expected: *dim,
                            actual: v.len(),
                        });
                    }
                    values.clone()
                }
                TargetSpec::Uniform { center, spread } => {
                    let mut rng = stream_rng(seed, stream::TARGETS);
                    (0..n)
                        .map(|_| {
                            (0..*dim)
                                .map(|_| center + spread * (2.0 * rng.random::<f64>() - 1.0))
                                .collect()
                        })
                        .collect()
                }
            };
            Ok(Task {
                objectives: values
                    .into_iter()
                    .map(|b| {
                        Arc::new(QuadraticObjective::new(b, *curvature, *noise_std))
                            as Arc<dyn LocalObjective>
                    })
                    .collect(),
                eval_data: None,
            })
        }
        TaskSpec::Softmax {
            data,
            partition: mode,
            batch_size,
        } => {
            let (train, test) = match data {
                DataSpec::Mnist {
                    dir,
                    train_limit,
                    test_limit,
                } => {
                    let split = load_mnist_dir(dir, *train_limit, *test_limit)?;
                    (split.train, split.test)
                }
                DataSpec::Synthetic {
                    classes,
                    feature_dim,
                    train,
                    test,
                    separation,
                } => Dataset::gaussian_blobs(
                    *classes,
                    *feature_dim,
                    train + test,
                    *separation,
                    derive_seed(seed, stream::DATA),
                )
                .split_at(*train),
            };
            let mode = match mode {
                PartitionSpec::Iid => PartitionMode::Iid {
                    seed: derive_seed(seed, stream::DATA),
                },
                PartitionSpec::PerDigitGroups => PartitionMode::PerDigitGroups,
            };
            let shards = partition(&train, n, mode)?;
            let train = Arc::new(train);
            let objectives = shards
                .into_iter()
                .map(|s| {
                    SoftmaxObjective::new(Arc::clone(&train), s, *batch_size)
                        .map(|o| Arc::new(o) as Arc<dyn LocalObjective>)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Task {
                objectives,
                eval_data: Some(Arc::new(test)),
            })
        }
    }
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: MetricsLog,
    /// Final models of the regular agents, in increasing index order.
    pub models: Vec<ModelVec>,
    pub regular: Vec<usize>,
    pub byzantine: Vec<usize>,
    pub edge_count: usize,
    pub eval_agent: Option<usize>,
    /// Trimmed-mean updates that had too few messages to trim.
    pub trim_fallbacks: usize,
}

/// Mutable run state plus the fixed setup.
pub struct Simulation {
    config: ExperimentConfig,
    schedule: NetworkSchedule,
    objectives: Vec<Arc<dyn LocalObjective>>,
    attack: Attack,
    rule: UpdateRule,
    regular: Vec<usize>,
    /// Every agent's model; Byzantine entries hold their true models.
    models: Vec<ModelVec>,
    rngs: Vec<SimRng>,
    round: usize,
    eval_agent: Option<usize>,
    eval_data: Option<Arc<Dataset>>,
    reference: Option<Vec<ModelVec>>,
    trim_fallbacks: usize,
    parallel: bool,
}

impl Simulation {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let topology = build_topology(&config.network, seed)?;
        let schedule = build_schedule(&config.network, topology, seed)?;
        let topology = schedule.topology();
        if !config.network.waive_connectivity {
            let ok = if schedule.is_static() {
                regular_subgraph_connected(topology)
            } else {
                schedule.average_network_connected()
            };
            if !ok {
                return Err(Error::Disconnected);
            }
        }
        let n = topology.n();
        let regular = topology.regular();
        let task = build_task(&config.task, n, seed)?;
        let dim = task.objectives[0].dim();
        let attack = Attack::resolve(
            config.attack,
            topology,
            derive_seed(seed, stream::COPY_TARGET),
        )?;
        let rule = UpdateRule::resolve(config.method, topology.byzantine().len())?;

        let mut init_rng = stream_rng(seed, stream::INIT);
        let models = (0..n)
            .map(|_| match config.init {
                InitSpec::Zeros => ModelVec::zeros(dim),
                InitSpec::Constant { value } => ModelVec::filled(dim, value),
                InitSpec::Gaussian { std } => (0..dim)
                    .map(|_| std * init_rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            })
            .collect();
        let rngs = (0..n)
            .map(|i| stream_rng(seed, stream::AGENT_BASE + i as u64))
            .collect();
        let eval_agent = task
            .eval_data
            .as_ref()
            .map(|_| regular[stream_rng(seed, stream::EVAL_AGENT).random_range(0..regular.len())]);

        let regular_objs: Vec<&dyn LocalObjective> = regular
            .iter()
            .map(|&i| task.objectives[i].as_ref())
            .collect();
        let is_quadratic = matches!(config.task, TaskSpec::Quadratic { .. });
        let reference = match (config.reference, is_quadratic) {
            (ReferenceSpec::None, _) | (ReferenceSpec::Auto, false) => None,
            (ReferenceSpec::Pooled, _) | (ReferenceSpec::Auto, true) => {
                let opt = global_optimum(&regular_objs)?;
                Some(vec![opt; regular.len()])
            }
            (ReferenceSpec::Penalized, _) => {
                let quads: Vec<QuadraticObjective> = regular_objs
                    .iter()
                    .map(|o| {
                        o.as_quadratic().cloned().ok_or_else(|| {
                            Error::Config("penalized reference needs a quadratic task".into())
                        })
                    })
                    .collect::<Result<_>>()?;
                let Method::Proposed { lambda, norm } = config.method else {
                    return Err(Error::Config(
                        "penalized reference needs the proposed method".into(),
                    ));
                };
                let weights = (!schedule.is_static()).then(|| schedule.average_edge_frequencies());
                Some(solve_penalized_exact(
                    &quads,
                    topology,
                    weights.as_ref(),
                    lambda,
                    norm,
                )?)
            }
        };

        Ok(Simulation {
            config,
            schedule,
            objectives: task.objectives,
            attack,
            rule,
            regular,
            models,
            rngs,
            round: 0,
            eval_agent,
            eval_data: task.eval_data,
            reference,
            trim_fallbacks: 0,
            parallel: true,
        })
    }

    /// Switches between rayon and a plain loop for agent updates.
    pub fn set_parallel(&mut self, parallel: bool) {
        self.parallel = parallel;
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NetworkSchedule {
        &self.schedule
    }

    pub fn topology(&self) -> &Topology {
        self.schedule.topology()
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn reference(&self) -> Option<&[ModelVec]> {
        self.reference.as_deref()
    }

    pub fn eval_agent(&self) -> Option<usize> {
        self.eval_agent
    }

    /// Objectives of the regular agents, in increasing index order.
    pub fn regular_objectives(&self) -> Vec<&dyn LocalObjective> {
        self.regular
            .iter()
            .map(|&i| self.objectives[i].as_ref())
            .collect()
    }

    /// Current models of the regular agents.
    pub fn regular_models(&self) -> Vec<ModelVec> {
        self.regular
            .iter()
            .map(|&i| self.models[i].clone())
            .collect()
    }

    /// The config with the sampled graph, Byzantine set and quadratic
    /// targets written out, so that other seeds rerun the same instance
    /// with fresh sampling noise.
    pub fn pinned_config(&self) -> ExperimentConfig {
        let t = self.schedule.topology();
        let mut config = self.config.clone();
        config.network.graph = GraphSpec::Explicit {
            n: t.n(),
            edges: t.edges().iter().copied().collect(),
        };
        config.network.byzantine = ByzantineSpec::Fixed {
            agents: t.byzantine().iter().copied().collect(),
        };
        if let TaskSpec::Quadratic { targets, .. } = &mut config.task {
            let values: Option<Vec<Vec<f64>>> = self
                .objectives
                .iter()
                .map(|o| o.as_quadratic().map(|q| q.target.0.clone()))
                .collect();
            if let Some(values) = values {
                *targets = TargetSpec::Explicit { values };
            }
        }
        config
    }

    /// Executes one round.
    pub fn step(&mut self) -> Result<()> {
        let k = self.round;
        let topology = self.schedule.topology();
        let n = topology.n();
        let mut neighbors = vec![Vec::new(); n];
        for (a, b) in self.schedule.edges_at(k) {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        let alpha = self.config.step.step_size(k);
        let train_byzantine = self.config.attack.needs_true_model();
        let local_only = self.config.true_model == TrueModelRule::LocalSgd;
        let models = &self.models;
        let objectives = &self.objectives;
        let attack = &self.attack;
        let rule = &self.rule;
        let neighbors = &neighbors;

        let update = |i: usize, rng: &mut SimRng| -> Result<Option<(ModelVec, bool)>> {
            let byzantine = topology.is_byzantine(i);
            if byzantine && !train_byzantine {
                return Ok(None);
            }
            let mut inbox = Inbox::new(i);
            if !(byzantine && local_only) {
                for &j in &neighbors[i] {
                    let payload = if !byzantine && topology.is_byzantine(j) {
                        let view = OmniscientView {
                            models,
                            topology,
                            neighbors,
                            receiver: i,
                            sender: j,
                        };
                        Cow::Owned(craft_message(attack, &view)?.into_inner())
                    } else {
                        Cow::Borrowed(models[j].as_ref())
                    };
                    inbox.push(j, payload);
                }
            }
            let x = &models[i];
            let grad = objectives[i].sample_gradient(x, rng);
            let reg = objectives[i].regularizer_gradient(x);
            rule.apply(x, &inbox, &grad, &reg, alpha).map(Some)
        };

        let results: Vec<Result<Option<(ModelVec, bool)>>> = if self.parallel {
            self.rngs
                .par_iter_mut()
                .enumerate()
                .map(|(i, rng)| update(i, rng))
                .collect()
        } else {
            self.rngs
                .iter_mut()
                .enumerate()
                .map(|(i, rng)| update(i, rng))
                .collect()
        };

        let mut next = Vec::with_capacity(n);
        for r in results {
            next.push(r.map_err(|e| match e {
                Error::NonFiniteUpdate { agent } => Error::NonFinite { agent, round: k },
                other => other,
            })?);
        }
        for (i, slot) in next.into_iter().enumerate() {
            if let Some((model, screened)) = slot {
                if !screened && !topology.is_byzantine(i) {
                    if self.trim_fallbacks == 0 {
                        log::warn!(
                            "agent {i} had too few messages to trim in round {k}; averaging all"
                        );
                    }
                    self.trim_fallbacks += 1;
                }
                self.models[i] = model;
            }
        }
        self.round += 1;
        Ok(())
    }

    /// Metrics of the current state.
    pub fn record(&self) -> Result<MetricsRecord> {
        let models = self.regular_models();
        let dist_sq = self.reference.as_ref().map(|r| dist_sq_stack(&models, r));
        let accuracy = match (self.eval_agent, &self.eval_data) {
            (Some(agent), Some(data)) => Some(accuracy(data, &self.models[agent])?),
            _ => None,
        };
        Ok(MetricsRecord {
            k: self.round,
            consensus_variance: consensus_variance(&models),
            dist_sq,
            accuracy,
        })
    }

    /// Runs the remaining rounds, recording at round 0, every `eval_every`
    /// rounds and at the end.
    pub fn run(mut self) -> Result<RunOutput> {
        let total = self.config.iterations;
        let every = self.config.eval_every;
        let mut log = MetricsLog::default();
        log.records.push(self.record()?);
        while self.round < total {
            self.step()?;
            if self.round.is_multiple_of(every) || self.round == total {
                log.records.push(self.record()?);
            }
        }
        let topology = self.schedule.topology();
        Ok(RunOutput {
            log,
            models: self.regular_models(),
            regular: self.regular.clone(),
            byzantine: topology.byzantine().iter().copied().collect(),
            edge_count: topology.edges().len(),
            eval_agent: self.eval_agent,
            trim_fallbacks: self.trim_fallbacks,
        })
    }
}

/// Builds and runs `config`.
pub fn run(config: &ExperimentConfig) -> Result<RunOutput> {
    Simulation::new(config.clone())?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::PenaltyNorm;
    use proptest::prelude::*;

    fn quad_config(
        n: usize,
        targets: Vec<Vec<f64>>,
        method: Method,
        step: StepSchedule,
        iters: usize,
    ) -> ExperimentConfig {
        ExperimentConfig {
            network: NetworkSpec {
                graph: GraphSpec::Complete { n },
                byzantine: ByzantineSpec::AsGiven,
                dynamics: Dynamics::Static,
                waive_connectivity: false,
            },
            task: TaskSpec::Quadratic {
                dim: targets[0].len(),
                targets: TargetSpec::Explicit { values: targets },
                curvature: 1.0,
                noise_std: 0.0,
            },
            attack: AttackSpec::None,
            method,
            step,
            iterations: iters,
            eval_every: 1,
            init: InitSpec::Zeros,
            reference: ReferenceSpec::Auto,
            true_model: TrueModelRule::Protocol,
            seed: 1,
        }
    }

    #[test]
    fn single_agent_halves() {
        let mut cfg = quad_config(
            1,
            vec![vec![0.0]],
            Method::Dpsgd,
            StepSchedule::Constant { value: 0.5 },
            3,
        );
        cfg.init = InitSpec::Constant { value: 4.0 };
        let out = run(&cfg).unwrap();
        let d: Vec<f64> = out.log.records.iter().map(|r| r.dist_sq.unwrap()).collect();
        assert_eq!(d, vec![16.0, 4.0, 1.0, 0.25]);
        assert_eq!(out.models[0].0, vec![0.5]);
    }

    #[test]
    fn two_agents_reach_consensus_above_threshold() {
        let cfg = quad_config(
            2,
            vec![vec![0.0], vec![2.0]],
            Method::Proposed {
                lambda: 2.0,
                norm: PenaltyNorm::L1,
            },
            StepSchedule::Theoretical {
                floor: 0.125,
                scale: 4.0,
            },
            10_000,
        );
        let out = run(&cfg).unwrap();
        for m in &out.models {
            assert!((m[0] - 1.0).abs() < 0.05, "{m:?}");
        }
    }

    #[test]
    fn metric_examples() {
        let same = vec![ModelVec::from([1.0, 2.0]); 3];
        assert_eq!(consensus_variance(&same), 0.0);
        assert_eq!(
            consensus_variance(&[ModelVec::from([1.0]), ModelVec::from([3.0])]),
            1.0
        );
        assert_eq!(consensus_variance(&[ModelVec::from([7.0])]), 0.0);
        assert_eq!(
            dist_sq_to(&[ModelVec::from([0.0]), ModelVec::from([2.0])], &[1.0]),
            2.0
        );
        assert_eq!(dist_sq_to(&same, &[1.0, 2.0]), 0.0);
    }

    proptest! {
        #[test]
        fn dist_sq_is_homogeneous(devs in prop::collection::vec(-5.0..5.0f64, 1..6)) {
            let models: Vec<ModelVec> = devs.iter().map(|d| ModelVec::from([1.0 + d])).collect();
            let scaled: Vec<ModelVec> = devs.iter().map(|d| ModelVec::from([1.0 + d * 2f64.sqrt()])).collect();
            let a = dist_sq_to(&models, &[1.0]);
            let b = dist_sq_to(&scaled, &[1.0]);
            prop_assert!((b - 2.0 * a).abs() <= 1e-9 * (1.0 + a));
        }
    }

    #[test]
    fn csv_round_trip_and_schema() {
        let log = MetricsLog {
            records: vec![
                MetricsRecord {
                    k: 0,
                    consensus_variance: 0.5,
                    dist_sq: None,
                    accuracy: Some(0.1),
                },
                MetricsRecord {
                    k: 10,
                    consensus_variance: 1e-30,
                    dist_sq: Some(2.0),
                    accuracy: None,
                },
            ],
        };
        let csv = log.to_csv();
        assert!(csv.starts_with("k,consensus_variance,dist_sq,accuracy\n0,0.5,,0.1\n"));
        assert_eq!(MetricsLog::parse_csv(&csv).unwrap(), log);
        assert!(MetricsLog::parse_csv("k,x\n").is_err());
    }

    fn attacked_config(parallel_seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            network: NetworkSpec {
                graph: GraphSpec::ErdosRenyi { n: 12, p: 0.6 },
                byzantine: ByzantineSpec::Random { count: 2 },
                dynamics: Dynamics::RandomActivation { p: 0.5 },
                waive_connectivity: false,
            },
            task: TaskSpec::Quadratic {
                dim: 3,
                targets: TargetSpec::Uniform {
                    center: 5.0,
                    spread: 1.0,
                },
                curvature: 1.0,
                noise_std: 0.3,
            },
            attack: AttackSpec::SignFlip { gamma: -4.0 },
            method: Method::Proposed {
                lambda: 0.3,
                norm: PenaltyNorm::L1,
            },
            step: StepSchedule::Practical { scale: 0.3 },
            iterations: 200,
            eval_every: 10,
            init: InitSpec::Gaussian { std: 1.0 },
            reference: ReferenceSpec::Auto,
            true_model: TrueModelRule::Protocol,
            seed: parallel_seed,
        }
    }

    #[test]
    fn parallel_matches_sequential_and_reruns() {
        let cfg = attacked_config(5);
        let a = run(&cfg).unwrap().log.to_csv();
        let b = run(&cfg).unwrap().log.to_csv();
        let mut seq = Simulation::new(cfg.clone()).unwrap();
        seq.set_parallel(false);
        let c = seq.run().unwrap().log.to_csv();
        assert_eq!(a, b);
        assert_eq!(a, c);
        let other = run(&attacked_config(6)).unwrap().log.to_csv();
        assert_ne!(a, other);
    }

    /// Snapshot isolation: one round equals a hand-rolled update over a
    /// frozen copy of the round-0 models.
    #[test]
    fn rounds_read_only_the_snapshot() {
        let mut cfg = attacked_config(9);
        cfg.task = TaskSpec::Quadratic {
            dim: 3,
            targets: TargetSpec::Uniform {
                center: 5.0,
                spread: 1.0,
            },
            curvature: 1.0,
            noise_std: 0.0,
        };
        cfg.attack = AttackSpec::SameValue { c: 50.0 };
        let mut sim = Simulation::new(cfg).unwrap();
        let snapshot = sim.models.clone();
        let edges = sim.schedule.edges_at(0);
        let alpha = sim.config.step.step_size(0);
        let t = sim.topology().clone();
        let mut expected = snapshot.clone();
        for i in t.regular() {
            let g = sim.objectives[i].full_gradient(&snapshot[i]);
            let mut signs = [0.0f64; 3];
            for &(a, b) in &edges {
                let j = if a == i {
                    b
                } else if b == i {
                    a
                } else {
                    continue;
                };
                let other = if t.is_byzantine(j) {
                    vec![50.0; 3]
                } else {
                    snapshot[j].0.clone()
                };
                for d in 0..3 {
                    let diff: f64 = snapshot[i][d] - other[d];
                    signs[d] += if diff > 0.0 {
                        1.0
                    } else if diff < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
            }
            for d in 0..3 {
                expected[i][d] = snapshot[i][d] - alpha * (g[d] + 0.3 * signs[d] + 0.0);
            }
        }
        sim.step().unwrap();
        for i in t.regular() {
            assert_eq!(sim.models[i], expected[i], "agent {i}");
        }
    }

    #[test]
    fn nan_aborts_with_round() {
        let mut cfg = quad_config(
            2,
            vec![vec![0.0], vec![1.0]],
            Method::Dpsgd,
            StepSchedule::Constant { value: 0.5 },
            5,
        );
        cfg.init = InitSpec::Constant {
            value: f64::INFINITY,
        };
        assert!(matches!(run(&cfg), Err(Error::NonFinite { round: 0, .. })));
    }

    #[test]
    fn disconnected_regulars_are_rejected_unless_waived() {
        let mut cfg = quad_config(
            3,
            vec![vec![0.0], vec![1.0], vec![2.0]],
            Method::Dpsgd,
            StepSchedule::Constant { value: 0.1 },
            5,
        );
        cfg.network.graph = GraphSpec::Path { n: 3 };
        cfg.network.byzantine = ByzantineSpec::Fixed { agents: vec![1] };
        cfg.attack = AttackSpec::SameValue { c: 1.0 };
        assert!(matches!(
            Simulation::new(cfg.clone()),
            Err(Error::Disconnected)
        ));
        cfg.network.waive_connectivity = true;
        assert!(run(&cfg).is_ok());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = attacked_config(3);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(
            serde_json::from_str::<ExperimentConfig>(&json).unwrap(),
            cfg
        );
    }

    #[test]
    fn synthetic_softmax_learns() {
        let cfg = ExperimentConfig {
            network: NetworkSpec {
                graph: GraphSpec::Complete { n: 4 },
                byzantine: ByzantineSpec::AsGiven,
                dynamics: Dynamics::Static,
                waive_connectivity: false,
            },
            task: TaskSpec::Softmax {
                data: DataSpec::Synthetic {
                    classes: 3,
                    feature_dim: 5,
                    train: 400,
                    test: 200,
                    separation: 6.0,
                },
                partition: PartitionSpec::Iid,
                batch_size: 16,
            },
            attack: AttackSpec::None,
            method: Method::Proposed {
                lambda: 0.01,
                norm: PenaltyNorm::L1,
            },
            step: StepSchedule::Practical { scale: 0.3 },
            iterations: 300,
            eval_every: 50,
            init: InitSpec::Zeros,
            reference: ReferenceSpec::Auto,
            true_model: TrueModelRule::Protocol,
            seed: 2,
        };
        let out = run(&cfg).unwrap();
        let last = out.log.last().unwrap();
        assert!(last.accuracy.unwrap() > 0.9, "{last:?}");
        assert!(last.dist_sq.is_none());
        assert!(out.eval_agent.is_some());
    }

    #[test]
    fn bridge_counts_fallbacks() {
        let cfg = quad_config(
            2,
            vec![vec![0.0], vec![1.0]],
            Method::BridgeS { trim: Some(1) },
            StepSchedule::Constant { value: 0.1 },
            4,
        );
        assert_eq!(run(&cfg).unwrap().trim_fallbacks, 8);
    }

    #[test]
    fn pinned_config_fixes_the_instance() {
        let sim = Simulation::new(attacked_config(5)).unwrap();
        let mut pinned = sim.pinned_config();
        pinned.seed = 99;
        let other = Simulation::new(pinned.clone()).unwrap();
        assert_eq!(other.topology(), sim.topology());
        let targets = |s: &Simulation| -> Vec<ModelVec> {
            s.regular_objectives()
                .iter()
                .map(|o| o.as_quadratic().unwrap().target.clone())
                .collect()
        };
        assert_eq!(targets(&other), targets(&sim));
        assert_ne!(
            run(&pinned).unwrap().log.to_csv(),
            run(&attacked_config(5)).unwrap().log.to_csv()
        );
    }
}
