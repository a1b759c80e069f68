//! Named presets and the flat scenario description they expand to.
//!
//! A [`Scenario`] is a flat table of keys. Presets fill every key; a config
//! file, `--set key=value` pairs and the named flags override keys in that
//! order. Sweep presets then expand into one [`ExperimentConfig`] per point.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use byzsgd_core::engine::{
    ByzantineSpec, DataSpec, Dynamics, GraphSpec, InitSpec, NetworkSpec, PartitionSpec,
    ReferenceSpec, TargetSpec, TaskSpec, TrueModelRule,
};
use byzsgd_core::{AttackSpec, ExperimentConfig, Method, PenaltyNorm, StepSchedule};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    NoAttack,
    ZeroSum,
    SameValue,
    SignFlip,
    LambdaSweep,
    ByzFractionSweep,
    NormSweep,
    NonIidCopy,
    TimeVaryingSameValue,
}

impl Preset {
    pub const ALL: [Preset; 9] = [
        Preset::NoAttack,
        Preset::ZeroSum,
        Preset::SameValue,
        Preset::SignFlip,
        Preset::LambdaSweep,
        Preset::ByzFractionSweep,
        Preset::NormSweep,
        Preset::NonIidCopy,
        Preset::TimeVaryingSameValue,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::NoAttack => "no_attack",
            Preset::ZeroSum => "zero_sum",
            Preset::SameValue => "same_value",
            Preset::SignFlip => "sign_flip",
            Preset::LambdaSweep => "lambda_sweep",
            Preset::ByzFractionSweep => "byz_fraction_sweep",
            Preset::NormSweep => "norm_sweep",
            Preset::NonIidCopy => "non_iid_copy",
            Preset::TimeVaryingSameValue => "time_varying_same_value",
        }
    }

    pub fn is_sweep(self) -> bool {
        matches!(
            self,
            Preset::LambdaSweep | Preset::ByzFractionSweep | Preset::NormSweep
        )
    }

    /// The complete key table of this preset.
    pub fn template(self) -> Scenario {
        let base = Scenario::default();
        let same_value = Scenario {
            b: 3,
            attack: AttackKind::SameValue,
            lambda: 0.01,
            step: 0.28,
            ..base.clone()
        };
        let sign_flip = Scenario {
            b: 3,
            attack: AttackKind::SignFlip,
            lambda: 0.0022,
            step: 0.5,
            ..base.clone()
        };
        let zero_sum = Scenario {
            b: 3,
            attack: AttackKind::ZeroSum,
            lambda: 0.001,
            step: 0.9,
            ..base.clone()
        };
        match self {
            Preset::NoAttack => base,
            Preset::ZeroSum => zero_sum,
            Preset::SameValue => same_value,
            Preset::SignFlip => sign_flip,
            Preset::LambdaSweep => Scenario {
                lambdas: vec![0.0, 0.001, 0.01, 0.1, 1.0],
                ..same_value
            },
            Preset::ByzFractionSweep => Scenario {
                byz_counts: vec![0, 3, 6, 9, 12],
                ..zero_sum
            },
            Preset::NormSweep => sign_flip,
            Preset::NonIidCopy => Scenario {
                b: 6,
                byzantine_agents: Some((24..30).collect()),
                partition: PartitionSpec::PerDigitGroups,
                attack: AttackKind::CopyRegular,
                lambda: 0.02,
                step: 0.4,
                ..base
            },
            Preset::TimeVaryingSameValue => Scenario {
                pe: Some(TIME_VARYING_PE),
                lambda: time_varying_lambda(TIME_VARYING_PE),
                step: 0.5,
                ..same_value
            },
        }
    }
}

/// Default edge activation probability of `time_varying_same_value`.
pub const TIME_VARYING_PE: f64 = 0.01;

/// Penalty of `time_varying_same_value` for activation probability `pe`:
/// `0.2` at `0.01` and `0.4` at `0.005`.
pub fn time_varying_lambda(pe: f64) -> f64 {
    0.002 / pe
}

/// Penalty norm, `λ` and step scale of each `norm_sweep` point.
pub const NORM_SWEEP: [(PenaltyNorm, f64, f64); 3] = [
    (PenaltyNorm::L1, 0.0022, 0.5),
    (PenaltyNorm::L2, 0.2, 0.4),
    (PenaltyNorm::Linf, 0.9, 0.4),
];

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
                format!(
                    "unknown preset `{s}` (expected one of {})",
                    names.join(", ")
                )
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Softmax,
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    ZeroSum,
    SameValue,
    SignFlip,
    CopyRegular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Proposed,
    Dpsgd,
    BridgeS,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    /// `step / √(k+1)`.
    Practical,
    /// `min{step_floor, step/(k+1)}`.
    Theoretical,
    Constant,
}

/// Every tunable key of a run. Field names are the config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub iters: usize,
    pub eval_every: usize,

    /// Agents of the generated Erdős–Rényi graph.
    pub n: usize,
    pub p_edge: f64,
    /// Byzantine agents, drawn so that the regular agents stay connected.
    pub b: usize,
    /// Fixed Byzantine agents instead of random ones.
    pub byzantine_agents: Option<Vec<usize>>,
    /// Edge-list file replacing the generated graph; its Byzantine line is
    /// used unless `byzantine_agents` is set.
    pub graph: Option<PathBuf>,
    /// Edge activation probability. Unset means a static network.
    pub pe: Option<f64>,

    pub task: TaskKind,
    /// Directory with MNIST IDX files. Unset means synthetic Gaussian blobs.
    pub data_dir: Option<PathBuf>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub partition: PartitionSpec,
    pub batch: usize,
    pub synthetic_classes: usize,
    pub synthetic_dim: usize,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_separation: f64,
    pub quad_dim: usize,
    pub quad_center: f64,
    pub quad_spread: f64,
    pub quad_curvature: f64,
    pub quad_noise: f64,

    pub attack: AttackKind,
    pub c: f64,
    pub gamma: f64,

    pub method: MethodKind,
    pub lambda: f64,
    pub norm: PenaltyNorm,
    /// Values trimmed per side by `bridge_s`; defaults to `b`.
    pub trim: Option<usize>,
    pub step_kind: StepKind,
    pub step: f64,
    pub step_floor: Option<f64>,
    /// Standard deviation of the Gaussian initial models; 0 starts at zero.
    pub init_std: f64,
    pub reference: ReferenceSpec,
    pub true_model: TrueModelRule,

    /// Points of `lambda_sweep`.
    pub lambdas: Vec<f64>,
    /// Points of `byz_fraction_sweep`.
    pub byz_counts: Vec<usize>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            seed: 1,
            iters: 3000,
            eval_every: 10,
            n: 30,
            p_edge: 0.7,
            b: 0,
            byzantine_agents: None,
            graph: None,
            pe: None,
            task: TaskKind::Softmax,
            data_dir: None,
            train_limit: None,
            test_limit: None,
            partition: PartitionSpec::Iid,
            batch: 32,
            synthetic_classes: 10,
            synthetic_dim: 64,
            synthetic_train: 6000,
            synthetic_test: 1000,
            synthetic_separation: 4.0,
            quad_dim: 10,
            quad_center: 0.0,
            quad_spread: 1.0,
            quad_curvature: 1.0,
            quad_noise: 1.0,
            attack: AttackKind::None,
            c: 100.0,
            gamma: -4.0,
            method: MethodKind::Proposed,
            lambda: 0.005,
            norm: PenaltyNorm::L1,
            trim: None,
            step_kind: StepKind::Practical,
            step: 0.3,
            step_floor: None,
            init_std: 0.0,
            reference: ReferenceSpec::Auto,
            true_model: TrueModelRule::Protocol,
            lambdas: Vec::new(),
            byz_counts: Vec::new(),
        }
    }
}

/// Key overrides, applied in insertion order of their sources.
pub type Overrides = BTreeMap<String, Value>;

/// Reads a flat TOML config. A `preset` key selects the template.
pub fn read_config_file(path: &Path) -> Result<(Option<Preset>, Overrides)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let table: toml::Table =
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let mut preset = None;
    let mut out = Overrides::new();
    for (key, value) in table {
        if key == "preset" {
            let name = value
                .as_str()
                .with_context(|| format!("{}: `preset` must be a string", path.display()))?;
            preset = Some(name.parse::<Preset>().map_err(anyhow::Error::msg)?);
            continue;
        }
        if value.is_table() {
            bail!(
                "{}: key `{key}` is a table; the config is flat",
                path.display()
            );
        }
        out.insert(key, serde_json::to_value(value)?);
    }
    Ok((preset, out))
}

/// Parses one `key=value` pair; the value is read as a TOML value and
/// falls back to a bare string.
pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let Some((key, raw)) = s.split_once('=') else {
        bail!("expected KEY=VALUE, got `{s}`");
    };
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => match t.remove("v") {
            Some(v) => serde_json::to_value(v)?,
            None => Value::String(raw.to_string()),
        },
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((key, value))
}

/// Applies `overrides` to the template of `preset` (`no_attack` when none).
pub fn resolve(preset: Option<Preset>, overrides: &Overrides) -> Result<Scenario> {
    let template = preset.unwrap_or(Preset::NoAttack).template();
    let Value::Object(mut table) = serde_json::to_value(&template)? else {
        unreachable!("a struct serializes to an object")
    };
    for (key, value) in overrides {
        if !table.contains_key(key) {
            let known: Vec<&str> = table.keys().map(String::as_str).collect();
            bail!("unknown key `{key}` (known keys: {})", known.join(", "));
        }
        table.insert(key.clone(), value.clone());
    }
    let mut scenario: Scenario =
        serde_json::from_value(Value::Object(table)).context("invalid scenario value")?;
    if preset == Some(Preset::TimeVaryingSameValue) && !overrides.contains_key("lambda") {
        let pe = scenario.pe.context("time_varying_same_value needs `pe`")?;
        scenario.lambda = time_varying_lambda(pe);
    }
    if preset == Some(Preset::NormSweep) {
        if let Some(key) = ["lambda", "step", "norm"]
            .into_iter()
            .find(|k| overrides.contains_key(*k))
        {
            bail!("norm_sweep fixes `{key}` per point; it cannot be overridden");
        }
    }
    scenario.check()?;
    Ok(scenario)
}

/// One run of a (possibly sweeping) scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    /// Output name; `run` for single-run presets.
    pub label: String,
    /// Swept value, if any.
    pub value: Option<f64>,
    pub config: ExperimentConfig,
}

impl Scenario {
    fn check(&self) -> Result<()> {
        if self.n == 0 || self.iters == 0 || self.eval_every == 0 || self.batch == 0 {
            bail!("n, iters, eval_every and batch must be positive");
        }
        if self.graph.is_none() && self.b >= self.n {
            bail!(
                "b = {} leaves no regular agent among n = {}",
                self.b,
                self.n
            );
        }
        if let Some(agents) = &self.byzantine_agents {
            if agents.len() != self.b {
                bail!(
                    "b = {} disagrees with {} byzantine_agents",
                    self.b,
                    agents.len()
                );
            }
        }
        if let Some(pe) = self.pe {
            if !(pe > 0.0 && pe <= 1.0) {
                bail!("pe = {pe} outside (0, 1]");
            }
        }
        if self.step_kind == StepKind::Theoretical && self.step_floor.is_none() {
            bail!("step_kind = \"theoretical\" needs step_floor");
        }
        Ok(())
    }

    /// The run of this scenario exactly as keyed.
    pub fn to_config(&self) -> Result<ExperimentConfig> {
        let graph = match &self.graph {
            Some(path) => GraphSpec::File { path: path.clone() },
            None => GraphSpec::ErdosRenyi {
                n: self.n,
                p: self.p_edge,
            },
        };
        let byzantine = match (&self.byzantine_agents, &self.graph) {
            (Some(agents), _) => ByzantineSpec::Fixed {
                agents: agents.clone(),
            },
            (None, Some(_)) => ByzantineSpec::AsGiven,
            (None, None) => ByzantineSpec::Random { count: self.b },
        };
        let dynamics = match self.pe {
            Some(p) => Dynamics::RandomActivation { p },
            None => Dynamics::Static,
        };
        let task = match self.task {
            TaskKind::Softmax => TaskSpec::Softmax {
                data: match &self.data_dir {
                    Some(dir) => DataSpec::Mnist {
                        dir: dir.clone(),
                        train_limit: self.train_limit,
                        test_limit: self.test_limit,
                    },
                    None => DataSpec::Synthetic {
                        classes: self.synthetic_classes,
                        feature_dim: self.synthetic_dim,
                        train: self.synthetic_train,
                        test: self.synthetic_test,
                        separation: self.synthetic_separation,
                    },
                },
                partition: self.partition,
                batch_size: self.batch,
            },
            TaskKind::Quadratic => TaskSpec::Quadratic {
                dim: self.quad_dim,
                targets: TargetSpec::Uniform {
                    center: self.quad_center,
                    spread: self.quad_spread,
                },
                curvature: self.quad_curvature,
                noise_std: self.quad_noise,
            },
        };
        let attack = match self.attack {
            AttackKind::None => AttackSpec::None,
            AttackKind::ZeroSum => AttackSpec::ZeroSum,
            AttackKind::SameValue => AttackSpec::SameValue { c: self.c },
            AttackKind::SignFlip => AttackSpec::SignFlip { gamma: self.gamma },
            AttackKind::CopyRegular => AttackSpec::CopyRegular,
        };
        let method = match self.method {
            MethodKind::Proposed => Method::Proposed {
                lambda: self.lambda,
                norm: self.norm,
            },
            MethodKind::Dpsgd => Method::Dpsgd,
            MethodKind::BridgeS => Method::BridgeS { trim: self.trim },
        };
        let step = match self.step_kind {
            StepKind::Practical => StepSchedule::Practical { scale: self.step },
            StepKind::Theoretical => StepSchedule::Theoretical {
                floor: self
                    .step_floor
                    .context("step_kind = \"theoretical\" needs step_floor")?,
                scale: self.step,
            },
            StepKind::Constant => StepSchedule::Constant { value: self.step },
        };
        let init = if self.init_std > 0.0 {
            InitSpec::Gaussian { std: self.init_std }
        } else {
            InitSpec::Zeros
        };
        let config = ExperimentConfig {
            network: NetworkSpec {
                graph,
                byzantine,
                dynamics,
                waive_connectivity: false,
            },
            task,
            attack,
            method,
            step,
            iterations: self.iters,
            eval_every: self.eval_every,
            init,
            reference: self.reference,
            true_model: self.true_model,
            seed: self.seed,
        };
        config.validate()?;
        Ok(config)
    }

    /// Expands the scenario into its runs.
    pub fn points(&self, preset: Option<Preset>) -> Result<Vec<Point>> {
        let single = |label: String, value: Option<f64>, s: &Scenario| -> Result<Point> {
            Ok(Point {
                label,
                value,
                config: s.to_config()?,
            })
        };
        match preset {
            Some(Preset::LambdaSweep) => {
                if self.lambdas.is_empty() {
                    bail!("lambda_sweep needs at least one value in `lambdas`");
                }
                self.lambdas
                    .iter()
                    .map(|&lambda| {
                        let s = Scenario {
                            lambda,
                            ..self.clone()
                        };
                        single(format!("lambda_{lambda}"), Some(lambda), &s)
                    })
                    .collect()
            }
            Some(Preset::ByzFractionSweep) => {
                if self.byz_counts.is_empty() {
                    bail!("byz_fraction_sweep needs at least one value in `byz_counts`");
                }
                if self.byzantine_agents.is_some() {
                    bail!("byz_fraction_sweep draws Byzantine agents; unset byzantine_agents");
                }
                self.byz_counts
                    .iter()
                    .map(|&b| {
                        let s = Scenario { b, ..self.clone() };
                        s.check()?;
                        single(format!("b_{b}"), Some(b as f64), &s)
                    })
                    .collect()
            }
            Some(Preset::NormSweep) => NORM_SWEEP
                .iter()
                .map(|&(norm, lambda, step)| {
                    let s = Scenario {
                        norm,
                        lambda,
                        step,
                        ..self.clone()
                    };
                    let label = match norm {
                        PenaltyNorm::L1 => "l1",
                        PenaltyNorm::L2 => "l2",
                        PenaltyNorm::Linf => "linf",
                    };
                    single(label.to_string(), None, &s)
                })
                .collect(),
            _ => Ok(vec![single("run".to_string(), None, self)?]),
        }
    }
}
