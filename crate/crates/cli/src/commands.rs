//! Argument parsing and the four subcommands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use byzsgd_core::analysis::{
    lambda_zero, sign_certificate, theory_for_instance, verify_neighborhood, NeighborhoodReport,
    TheoryBundle,
};
use byzsgd_core::engine::ReferenceSpec;
use byzsgd_core::graph::{assign_byzantine, gen_erdos_renyi, Edge};
use byzsgd_core::objectives::global_optimum;
use byzsgd_core::rng::{derive_seed, stream};
use byzsgd_core::{
    ExperimentConfig, LocalObjective, MetricsLog, ModelVec, PenaltyNorm, QuadraticObjective,
    RunOutput, Simulation, StepSchedule, Topology,
};
use clap::{ArgAction, Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::manifest::{Manifest, INDEX_FILE, MANIFEST_FILE, METRICS_FILE, VERSION};
use crate::scenario::{
    parse_assignment, read_config_file, resolve, MethodKind, Overrides, Preset, Scenario, TaskKind,
};

#[derive(Debug, Parser)]
#[command(name = "byzsgd", version = VERSION, about = "Byzantine-robust decentralized SGD experiments")]
pub struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a preset or config and write metrics.csv and manifest.json.
    Run(RunArgs),
    /// Check a quadratic instance against its theoretical neighborhood.
    Verify(VerifyArgs),
    /// Print the consensus threshold λ₀ of a quadratic instance.
    Lambda0(Lambda0Args),
    /// Write an Erdős–Rényi edge list with Byzantine agents.
    GenGraph(GenGraphArgs),
}

/// Keys shared by `run` and `verify`. Later sources win: config file,
/// then `--set`, then the named flags.
#[derive(Debug, Clone, Default, Args)]
pub struct ScenarioArgs {
    #[arg(long)]
    pub preset: Option<Preset>,
    /// Flat TOML file of scenario keys; may set `preset`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Step-size scale.
    #[arg(long)]
    pub step: Option<f64>,
    /// none, zero_sum, same_value, sign_flip or copy_regular.
    #[arg(long)]
    pub attack: Option<String>,
    #[arg(long)]
    pub b: Option<usize>,
    /// Edge activation probability; makes the network time-varying.
    #[arg(long)]
    pub pe: Option<f64>,
    /// l1, l2 or linf.
    #[arg(long)]
    pub norm: Option<String>,
    /// proposed, dpsgd or bridge_s.
    #[arg(long)]
    pub method: Option<String>,
    /// Directory with MNIST IDX files.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Any scenario key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ScenarioArgs {
    fn overrides(&self) -> Result<(Option<Preset>, Overrides)> {
        let mut preset = None;
        let mut overrides = Overrides::new();
        if let Some(path) = &self.config {
            let (p, o) = read_config_file(path)?;
            preset = p;
            overrides.extend(o);
        }
        if self.preset.is_some() {
            preset = self.preset;
        }
        for s in &self.set {
            let (k, v) = parse_assignment(s)?;
            overrides.insert(k, v);
        }
        let mut put = |key: &str, value: Option<Value>| {
            if let Some(v) = value {
                overrides.insert(key.to_string(), v);
            }
        };
        put("seed", self.seed.map(|v| json!(v)));
        put("iters", self.iters.map(|v| json!(v)));
        put("lambda", self.lambda.map(|v| json!(v)));
        put("step", self.step.map(|v| json!(v)));
        put("attack", self.attack.as_ref().map(|v| json!(v)));
        put("b", self.b.map(|v| json!(v)));
        put("pe", self.pe.map(|v| json!(v)));
        put("method", self.method.as_ref().map(|v| json!(v)));
        put("data_dir", self.data_dir.as_ref().map(|v| json!(v)));
        if let Some(norm) = &self.norm {
            let norm: PenaltyNorm = norm.parse()?;
            overrides.insert("norm".into(), serde_json::to_value(norm)?);
        }
        Ok((preset, overrides))
    }

    pub fn resolve(&self) -> Result<(Option<Preset>, Scenario)> {
        let (preset, overrides) = self.overrides()?;
        Ok((preset, resolve(preset, &overrides)?))
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Re-run the config recorded in a manifest (file or run directory).
    #[arg(long, conflicts_with = "ScenarioArgs")]
    pub manifest: Option<PathBuf>,
    /// Update agents on one thread.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Independent runs of the pinned instance.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Slack ε in η = min 2uL/(u+L) − ε; defaults to half the minimum.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Step scale ᾱ of the theoretical schedule; defaults to 2/η.
    #[arg(long)]
    pub alpha_scale: Option<f64>,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Lambda0Args {
    /// Edge-list file.
    #[arg(long)]
    pub graph: PathBuf,
    /// `quad:b_1,b_2,...`: one quadratic target per agent, coordinates
    /// separated by `;`.
    #[arg(long)]
    pub task: String,
    #[arg(long, default_value_t = 1.0)]
    pub curvature: f64,
    /// Activation probability of every reliable edge.
    #[arg(long)]
    pub pe: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenGraphArgs {
    #[arg(long, default_value_t = 30)]
    pub n: usize,
    #[arg(long, default_value_t = 0.7)]
    pub p: f64,
    #[arg(long, default_value_t = 0)]
    pub b: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Run(args) => run(args, out),
        Command::Verify(args) => verify(args, out),
        Command::Lambda0(args) => lambda0(args, out),
        Command::GenGraph(args) => gen_graph(args, out),
    }
}

fn simulate(config: &ExperimentConfig, sequential: bool) -> Result<(RunOutput, f64)> {
    let start = Instant::now();
    let mut sim = Simulation::new(config.clone())?;
    sim.set_parallel(!sequential);
    let output = sim.run()?;
    Ok((output, start.elapsed().as_secs_f64()))
}

fn summary(label: &str, log: &MetricsLog, dir: &Path) -> String {
    let mut s = format!("{label}: {} records", log.records.len());
    if let Some(r) = log.last() {
        let _ = write!(
            s,
            ", k={} consensus_variance={:e}",
            r.k, r.consensus_variance
        );
        if let Some(d) = r.dist_sq {
            let _ = write!(s, " dist_sq={d:e}");
        }
        if let Some(a) = r.accuracy {
            let _ = write!(s, " accuracy={a:.4}");
        }
    }
    let _ = write!(s, " -> {}", dir.join(METRICS_FILE).display());
    s
}

fn write_run(dir: &Path, log: &MetricsLog, manifest: &Manifest) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    log.write_csv(&dir.join(METRICS_FILE))?;
    manifest.write(&dir.join(MANIFEST_FILE))
}

pub fn run(args: &RunArgs, out: &mut dyn Write) -> Result<()> {
    if let Some(path) = &args.manifest {
        let path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.clone()
        };
        let old = Manifest::read(&path)?;
        let (output, wall) = simulate(&old.config, args.sequential)?;
        let manifest = Manifest {
            version: VERSION.to_string(),
            wall_time_secs: wall,
            ..old
        };
        write_run(&args.out, &output.log, &manifest)?;
        writeln!(out, "{}", summary(&manifest.point, &output.log, &args.out))?;
        return Ok(());
    }

    let (preset, scenario) = args.scenario.resolve()?;
    if let Some(dir) = &scenario.data_dir {
        if !dir.is_dir() {
            bail!("data directory {} not found", dir.display());
        }
    }
    let points = scenario.points(preset)?;
    let sweep = preset.is_some_and(Preset::is_sweep);
    let results: Vec<(RunOutput, f64)> = points
        .par_iter()
        .map(|p| {
            simulate(&p.config, args.sequential)
                .with_context(|| format!("running point {}", p.label))
        })
        .collect::<Result<_>>()?;

    let mut index = String::from("point,value,metrics\n");
    for (point, (output, wall)) in points.iter().zip(&results) {
        let dir = if sweep {
            args.out.join(&point.label)
        } else {
            args.out.clone()
        };
        let manifest = Manifest {
            version: VERSION.to_string(),
            preset: preset.map(|p| p.name().to_string()),
            point: point.label.clone(),
            seed: point.config.seed,
            wall_time_secs: *wall,
            scenario: Some(scenario.clone()),
            config: point.config.clone(),
        };
        write_run(&dir, &output.log, &manifest)?;
        let value = point.value.map(|v| format!("{v:?}")).unwrap_or_default();
        let _ = writeln!(
            index,
            "{},{value},{}/{METRICS_FILE}",
            point.label, point.label
        );
        writeln!(out, "{}", summary(&point.label, &output.log, &dir))?;
    }
    if sweep {
        let path = args.out.join(INDEX_FILE);
        std::fs::write(&path, index).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub version: String,
    pub theory: TheoryBundle,
    /// `ᾱΔ₂` on static networks, `ᾱΔ₆` on time-varying ones.
    pub bound: f64,
    pub consensual: bool,
    pub certificate_max_abs: f64,
    pub certificate_valid: bool,
    pub neighborhood: NeighborhoodReport,
    pub config: ExperimentConfig,
}

pub fn verify(args: &VerifyArgs, out: &mut dyn Write) -> Result<()> {
    let (preset, mut scenario) = args.scenario.resolve()?;
    if preset.is_some_and(Preset::is_sweep) {
        bail!(
            "verify checks a single scenario; {} is a sweep",
            preset.unwrap_or(Preset::NoAttack)
        );
    }
    if args.seeds == 0 {
        bail!("verify needs at least one seed");
    }
    scenario.task = TaskKind::Quadratic;
    if scenario.method != MethodKind::Proposed || scenario.norm != PenaltyNorm::L1 {
        bail!("verify needs method = \"proposed\" with the l1 norm");
    }
    let mut base = scenario.to_config()?;
    base.reference = ReferenceSpec::None;
    let sim = Simulation::new(base)?;
    let weights = (!sim.schedule().is_static()).then(|| sim.schedule().average_edge_frequencies());
    let objectives = sim.regular_objectives();

    let contraction = objectives
        .iter()
        .filter_map(|o| o.constants())
        .map(|c| 2.0 * c.strong_convexity * c.smoothness / (c.strong_convexity + c.smoothness))
        .fold(f64::INFINITY, f64::min);
    let eta = contraction - args.epsilon.unwrap_or(contraction / 2.0);
    let alpha_scale = args.alpha_scale.unwrap_or(2.0 / eta);
    let theory = theory_for_instance(
        sim.topology(),
        weights.as_ref(),
        &objectives,
        scenario.lambda,
        args.epsilon,
        alpha_scale,
    )?;
    let optimum = global_optimum(&objectives)?;
    let v: Vec<ModelVec> = objectives
        .iter()
        .map(|o| o.full_gradient(&optimum))
        .collect();
    let cert = sign_certificate(sim.topology(), weights.as_ref(), &v, scenario.lambda)?;

    let mut pinned = sim.pinned_config();
    pinned.step = StepSchedule::Theoretical {
        floor: theory.alpha_floor,
        scale: alpha_scale,
    };
    pinned.reference = ReferenceSpec::Penalized;
    let logs: Vec<MetricsLog> = (0..args.seeds)
        .into_par_iter()
        .map(|s| {
            let mut c = pinned.clone();
            c.seed = scenario.seed.wrapping_add(s);
            Ok(byzsgd_core::run(&c)?.log)
        })
        .collect::<Result<_>>()?;
    let bound = if weights.is_some() {
        theory.time_varying_bound()
    } else {
        theory.static_bound()
    };
    let report = VerifyReport {
        version: VERSION.to_string(),
        theory,
        bound,
        consensual: scenario.lambda >= theory.lambda_zero,
        certificate_max_abs: cert.max_abs,
        certificate_valid: cert.valid,
        neighborhood: verify_neighborhood(&logs, bound)?,
        config: pinned,
    };
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(path) = &args.out {
        std::fs::write(path, format!("{text}\n"))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    writeln!(out, "{text}")?;
    let n = &report.neighborhood;
    if !n.pass {
        bail!(
            "plateau {:.4e} exceeds the bound {:.4e} by more than three standard errors ({:.2e})",
            n.mean,
            n.bound,
            n.standard_error
        );
    }
    Ok(())
}

/// Targets of `quad:0,2` style task strings.
pub fn parse_quad_task(s: &str) -> Result<Vec<Vec<f64>>> {
    let Some(body) = s.strip_prefix("quad:") else {
        bail!("task `{s}` must start with `quad:`");
    };
    let targets: Vec<Vec<f64>> = body
        .split(',')
        .map(|agent| {
            agent
                .split(';')
                .map(|x| {
                    x.trim()
                        .parse::<f64>()
                        .with_context(|| format!("bad target `{x}` in `{s}`"))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let dim = targets[0].len();
    if targets.iter().any(|t| t.len() != dim) {
        bail!("targets in `{s}` have different dimensions");
    }
    Ok(targets)
}

/// Prints `x` with its last couple of ulps of SVD noise removed.
fn tidy(x: f64) -> f64 {
    format!("{x:.12e}").parse().unwrap_or(x)
}

pub fn lambda0(args: &Lambda0Args, out: &mut dyn Write) -> Result<()> {
    let t = Topology::read_edge_list(&args.graph)?;
    let targets = parse_quad_task(&args.task)?;
    let regular = t.regular();
    let targets: Vec<Vec<f64>> = if targets.len() == t.n() {
        regular.iter().map(|&i| targets[i].clone()).collect()
    } else if targets.len() == regular.len() {
        targets
    } else {
        bail!(
            "{} targets for {} agents ({} regular)",
            targets.len(),
            t.n(),
            regular.len()
        );
    };
    if !(args.curvature > 0.0) {
        bail!("curvature must be positive");
    }
    let quads: Vec<QuadraticObjective> = targets
        .into_iter()
        .map(|b| QuadraticObjective::exact(b, args.curvature))
        .collect();
    let objectives: Vec<&dyn LocalObjective> =
        quads.iter().map(|q| q as &dyn LocalObjective).collect();
    let weights: Option<BTreeMap<Edge, f64>> = match args.pe {
        Some(p) if !(p > 0.0 && p <= 1.0) => bail!("pe = {p} outside (0, 1]"),
        Some(p) => Some(t.reliable_edges().into_iter().map(|e| (e, p)).collect()),
        None => None,
    };
    let optimum = global_optimum(&objectives)?;
    let l0 = lambda_zero(&t, weights.as_ref(), &objectives, &optimum)?;
    writeln!(out, "{:?}", tidy(l0))?;
    Ok(())
}

/// Same draw as the engine's generated graph for `seed`.
pub fn gen_graph(args: &GenGraphArgs, out: &mut dyn Write) -> Result<()> {
    let base = gen_erdos_renyi(args.n, args.p, derive_seed(args.seed, stream::GRAPH))?;
    let t = assign_byzantine(
        &base,
        args.b,
        derive_seed(args.seed, stream::BYZANTINE),
        true,
    )?;
    let text = t.to_edge_list();
    match &args.out {
        Some(path) => {
            t.write_edge_list(path)?;
            writeln!(
                out,
                "wrote {} ({} edges, {} Byzantine)",
                path.display(),
                t.edges().len(),
                t.byzantine().len()
            )?;
        }
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}
