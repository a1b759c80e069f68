use std::path::Path;
use std::process::{Command, Output};

use byzsgd_cli::commands::{Cli, Command as Sub};
use byzsgd_cli::scenario::{resolve, AttackKind, Overrides, Point};
use byzsgd_cli::{Manifest, Preset, Scenario};
use byzsgd_core::engine::{ByzantineSpec, Dynamics, PartitionSpec};
use byzsgd_core::{AttackSpec, Method, PenaltyNorm, Simulation, StepSchedule};
use clap::Parser;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_byzsgd"))
        .args(args)
        .output()
        .expect("spawn byzsgd")
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(
        out.status.success(),
        "byzsgd {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn preset(p: Preset) -> Scenario {
    resolve(Some(p), &Overrides::new()).unwrap()
}

fn single(p: Preset) -> Point {
    let mut points = preset(p).points(Some(p)).unwrap();
    assert_eq!(points.len(), 1);
    points.remove(0)
}

fn proposed(point: &Point) -> (f64, PenaltyNorm, f64) {
    let Method::Proposed { lambda, norm } = point.config.method else {
        panic!("{}: not the proposed method", point.label)
    };
    let StepSchedule::Practical { scale } = point.config.step else {
        panic!("{}: not a 1/sqrt(k+1) schedule", point.label)
    };
    (lambda, norm, scale)
}

fn byzantine_count(point: &Point) -> usize {
    match &point.config.network.byzantine {
        ByzantineSpec::Random { count } => *count,
        ByzantineSpec::Fixed { agents } => agents.len(),
        ByzantineSpec::AsGiven => 0,
    }
}

fn check_shared(s: &Scenario) {
    assert_eq!((s.n, s.p_edge, s.batch, s.iters), (30, 0.7, 32, 3000));
}

#[test]
fn preset_no_attack() {
    let s = preset(Preset::NoAttack);
    check_shared(&s);
    let p = single(Preset::NoAttack);
    assert_eq!(proposed(&p), (0.005, PenaltyNorm::L1, 0.3));
    assert_eq!(byzantine_count(&p), 0);
    assert_eq!(p.config.attack, AttackSpec::None);
}

#[test]
fn preset_zero_sum() {
    check_shared(&preset(Preset::ZeroSum));
    let p = single(Preset::ZeroSum);
    assert_eq!(proposed(&p), (0.001, PenaltyNorm::L1, 0.9));
    assert_eq!(byzantine_count(&p), 3);
    assert_eq!(p.config.attack, AttackSpec::ZeroSum);
}

#[test]
fn preset_same_value() {
    check_shared(&preset(Preset::SameValue));
    let p = single(Preset::SameValue);
    assert_eq!(proposed(&p), (0.01, PenaltyNorm::L1, 0.28));
    assert_eq!(byzantine_count(&p), 3);
    assert_eq!(p.config.attack, AttackSpec::SameValue { c: 100.0 });
}

#[test]
fn preset_sign_flip() {
    check_shared(&preset(Preset::SignFlip));
    let p = single(Preset::SignFlip);
    assert_eq!(proposed(&p), (0.0022, PenaltyNorm::L1, 0.5));
    assert_eq!(byzantine_count(&p), 3);
    assert_eq!(p.config.attack, AttackSpec::SignFlip { gamma: -4.0 });
}

#[test]
fn preset_lambda_sweep() {
    let s = preset(Preset::LambdaSweep);
    check_shared(&s);
    let points = s.points(Some(Preset::LambdaSweep)).unwrap();
    let lambdas: Vec<f64> = points.iter().map(|p| proposed(p).0).collect();
    assert_eq!(lambdas, vec![0.0, 0.001, 0.01, 0.1, 1.0]);
    for p in &points {
        assert_eq!(proposed(p).2, 0.28);
        assert_eq!(byzantine_count(p), 3);
        assert_eq!(p.config.attack, AttackSpec::SameValue { c: 100.0 });
    }
}

#[test]
fn preset_byz_fraction_sweep() {
    let s = preset(Preset::ByzFractionSweep);
    check_shared(&s);
    let points = s.points(Some(Preset::ByzFractionSweep)).unwrap();
    let counts: Vec<usize> = points.iter().map(byzantine_count).collect();
    assert_eq!(counts, vec![0, 3, 6, 9, 12]);
    assert!(counts.iter().all(|&b| 30 >= 2 * b + 1));
    for p in &points {
        assert_eq!(proposed(p), (0.001, PenaltyNorm::L1, 0.9));
        assert_eq!(p.config.attack, AttackSpec::ZeroSum);
    }
}

#[test]
fn preset_norm_sweep() {
    let s = preset(Preset::NormSweep);
    check_shared(&s);
    let points = s.points(Some(Preset::NormSweep)).unwrap();
    let table: Vec<(f64, PenaltyNorm, f64)> = points.iter().map(proposed).collect();
    assert_eq!(
        table,
        vec![
            (0.0022, PenaltyNorm::L1, 0.5),
            (0.2, PenaltyNorm::L2, 0.4),
            (0.9, PenaltyNorm::Linf, 0.4),
        ]
    );
    for p in &points {
        assert_eq!(p.config.attack, AttackSpec::SignFlip { gamma: -4.0 });
        assert_eq!(byzantine_count(p), 3);
    }
    let mut o = Overrides::new();
    o.insert("lambda".into(), serde_json::json!(0.1));
    assert!(resolve(Some(Preset::NormSweep), &o).is_err());
}

#[test]
fn preset_non_iid_copy() {
    let s = preset(Preset::NonIidCopy);
    check_shared(&s);
    assert_eq!(s.partition, PartitionSpec::PerDigitGroups);
    let p = single(Preset::NonIidCopy);
    assert_eq!(proposed(&p), (0.02, PenaltyNorm::L1, 0.4));
    assert_eq!(p.config.attack, AttackSpec::CopyRegular);
    // Three agents per digit, so agents 24..30 hold digits 8 and 9.
    assert_eq!(
        p.config.network.byzantine,
        ByzantineSpec::Fixed {
            agents: vec![24, 25, 26, 27, 28, 29]
        }
    );
}

#[test]
fn preset_time_varying_same_value() {
    let s = preset(Preset::TimeVaryingSameValue);
    check_shared(&s);
    assert_eq!(s.attack, AttackKind::SameValue);
    let p = single(Preset::TimeVaryingSameValue);
    assert_eq!(proposed(&p), (0.2, PenaltyNorm::L1, 0.5));
    assert_eq!(
        p.config.network.dynamics,
        Dynamics::RandomActivation { p: 0.01 }
    );

    let cli = Cli::try_parse_from([
        "byzsgd",
        "run",
        "--preset",
        "time_varying_same_value",
        "--pe",
        "0.005",
        "--out",
        "x",
    ])
    .unwrap();
    let Sub::Run(args) = cli.command else {
        panic!()
    };
    let (preset, s) = args.scenario.resolve().unwrap();
    let p = s.points(preset).unwrap().remove(0);
    assert_eq!(proposed(&p), (0.4, PenaltyNorm::L1, 0.5));
    assert_eq!(
        p.config.network.dynamics,
        Dynamics::RandomActivation { p: 0.005 }
    );

    // An explicit λ wins over the pe-derived default.
    let cli = Cli::try_parse_from([
        "byzsgd",
        "run",
        "--preset",
        "time_varying_same_value",
        "--pe",
        "0.005",
        "--lambda",
        "0.3",
        "--out",
        "x",
    ])
    .unwrap();
    let Sub::Run(args) = cli.command else {
        panic!()
    };
    assert_eq!(args.scenario.resolve().unwrap().1.lambda, 0.3);
}

#[test]
fn flags_override_config_file_which_overrides_preset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, "preset = \"zero_sum\"\nlambda = 0.5\nseed = 4\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    let parse = |extra: &[&str]| {
        let mut argv = vec!["byzsgd", "run", "--config", cfg, "--out", "x"];
        argv.extend_from_slice(extra);
        let Sub::Run(args) = Cli::try_parse_from(argv).unwrap().command else {
            panic!()
        };
        args.scenario.resolve().unwrap()
    };
    let (p, s) = parse(&[]);
    assert_eq!(p, Some(Preset::ZeroSum));
    assert_eq!((s.lambda, s.seed, s.step), (0.5, 4, 0.9));
    let (_, s) = parse(&["--set", "lambda=0.25", "--seed", "9"]);
    assert_eq!((s.lambda, s.seed), (0.25, 9));
    let (_, s) = parse(&["--set", "lambda=0.25", "--lambda", "0.125"]);
    assert_eq!(s.lambda, 0.125);
    let (p, _) = parse(&["--preset", "sign_flip"]);
    assert_eq!(p, Some(Preset::SignFlip));
}

#[test]
fn bad_configs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    let nested = dir.path().join("nested.toml");
    std::fs::write(&nested, "[network]\nn = 3\n").unwrap();
    let unknown = dir.path().join("unknown.toml");
    std::fs::write(&unknown, "lamda = 1.0\n").unwrap();
    for (args, needle) in [
        (
            vec!["run", "--preset", "nope", "--out", out],
            "unknown preset",
        ),
        (
            vec!["run", "--config", nested.to_str().unwrap(), "--out", out],
            "flat",
        ),
        (
            vec!["run", "--config", unknown.to_str().unwrap(), "--out", out],
            "lamda",
        ),
        (
            vec![
                "run",
                "--preset",
                "same_value",
                "--data-dir",
                "/definitely/missing",
                "--out",
                out,
            ],
            "not found",
        ),
        (
            vec!["run", "--preset", "same_value", "--b", "40", "--out", out],
            "regular",
        ),
        (
            vec![
                "run",
                "--preset",
                "same_value",
                "--attack",
                "sign_flip",
                "--set",
                "gamma=2",
                "--out",
                out,
            ],
            "negative",
        ),
        (
            vec![
                "lambda0",
                "--graph",
                "/definitely/missing.txt",
                "--task",
                "quad:0,2",
            ],
            "missing.txt",
        ),
    ] {
        let o = bin(&args);
        assert!(!o.status.success(), "{args:?} succeeded");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(needle), "{args:?}: {err}");
    }
}

#[test]
fn lambda0_hand_example() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("path2.txt");
    std::fs::write(&g, "2 0\n0 1\n\n").unwrap();
    let g = g.to_str().unwrap();
    assert_eq!(
        ok(&["lambda0", "--graph", g, "--task", "quad:0,2"]),
        "1.0\n"
    );
    assert_eq!(
        ok(&["lambda0", "--graph", g, "--task", "quad:0,2", "--pe", "0.5"]),
        "2.0\n"
    );
    assert_eq!(
        ok(&["lambda0", "--graph", g, "--task", "quad:1,1"]),
        "0.0\n"
    );
}

#[test]
fn gen_graph_matches_the_engine_draw() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.txt");
    ok(&[
        "gen-graph",
        "--n",
        "12",
        "--p",
        "0.5",
        "--b",
        "2",
        "--seed",
        "7",
        "--out",
        path.to_str().unwrap(),
    ]);
    let file = byzsgd_core::Topology::read_edge_list(&path).unwrap();
    let mut o = Overrides::new();
    o.insert("n".into(), serde_json::json!(12));
    o.insert("p_edge".into(), serde_json::json!(0.5));
    o.insert("b".into(), serde_json::json!(2));
    o.insert("seed".into(), serde_json::json!(7));
    o.insert("task".into(), serde_json::json!("quadratic"));
    let cfg = resolve(None, &o).unwrap().to_config().unwrap();
    let sim = Simulation::new(cfg).unwrap();
    assert_eq!(sim.topology(), &file);
    assert_eq!(
        ok(&[
            "gen-graph",
            "--n",
            "12",
            "--p",
            "0.5",
            "--b",
            "2",
            "--seed",
            "7"
        ]),
        file.to_edge_list()
    );
}

fn small_softmax(preset: &str, out: &Path, extra: &[&str]) -> String {
    let mut args = vec![
        "run",
        "--preset",
        preset,
        "--iters",
        "20",
        "--set",
        "synthetic_train=600",
        "--set",
        "synthetic_test=100",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn every_preset_runs_and_writes_its_files() {
    let dir = tempfile::tempdir().unwrap();
    for p in Preset::ALL {
        let out = dir.path().join(p.name());
        let stdout = small_softmax(p.name(), &out, &[]);
        let runs: Vec<std::path::PathBuf> = if p.is_sweep() {
            let index = std::fs::read_to_string(out.join("index.csv")).unwrap();
            let lines: Vec<&str> = index.lines().collect();
            assert_eq!(lines[0], "point,value,metrics");
            lines[1..]
                .iter()
                .map(|l| out.join(l.split(',').next().unwrap()))
                .collect()
        } else {
            vec![out.clone()]
        };
        assert_eq!(stdout.lines().count(), runs.len(), "{stdout}");
        for run in runs {
            let log = byzsgd_core::MetricsLog::read_csv(&run.join("metrics.csv")).unwrap();
            assert_eq!(log.records.len(), 3, "{}", run.display());
            assert!(log.records.iter().all(|r| r.accuracy.is_some()));
            let m = Manifest::read(&run.join("manifest.json")).unwrap();
            assert_eq!(m.preset.as_deref(), Some(p.name()));
            assert_eq!(m.seed, 1);
        }
    }
}

#[test]
fn manifest_rerun_reproduces_the_csv() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    small_softmax(
        "sign_flip",
        &first,
        &["--seed", "3", "--set", "init_std=0.1"],
    );
    ok(&[
        "run",
        "--manifest",
        first.to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
    ]);
    let a = std::fs::read(first.join("metrics.csv")).unwrap();
    let b = std::fs::read(second.join("metrics.csv")).unwrap();
    assert_eq!(a, b);
    let ma = Manifest::read(&first.join("manifest.json")).unwrap();
    let mb = Manifest::read(&second.join("manifest.json")).unwrap();
    assert_eq!(ma.config, mb.config);
    assert_eq!(mb.seed, 3);
    let o = bin(&[
        "run",
        "--manifest",
        "x",
        "--preset",
        "zero_sum",
        "--out",
        "y",
    ]);
    assert!(!o.status.success());
}

#[test]
fn same_seed_gives_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    small_softmax("zero_sum", &a, &[]);
    small_softmax("zero_sum", &b, &["--sequential"]);
    assert_eq!(
        std::fs::read(a.join("metrics.csv")).unwrap(),
        std::fs::read(b.join("metrics.csv")).unwrap()
    );
}

#[test]
fn verify_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let stdout = ok(&[
        "verify",
        "--preset",
        "same_value",
        "--set",
        "n=6",
        "--set",
        "b=1",
        "--set",
        "quad_dim=2",
        "--lambda",
        "0.5",
        "--iters",
        "2000",
        "--seeds",
        "4",
        "--out",
        report.to_str().unwrap(),
    ]);
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let file: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v, file);
    let bundle = &v["theory"];
    assert_eq!(bundle["lambda"], 0.5);
    let bound = v["bound"].as_f64().unwrap();
    let expected = bundle["alpha_scale"].as_f64().unwrap() * bundle["delta2"].as_f64().unwrap();
    assert!((bound - expected).abs() <= 1e-12 * expected);
    assert_eq!(v["neighborhood"]["plateaus"].as_array().unwrap().len(), 4);
    assert!(v["neighborhood"]["pass"].is_boolean());
    if v["consensual"].as_bool().unwrap() {
        assert!(v["certificate_valid"].as_bool().unwrap());
    }
    let o = bin(&["verify", "--preset", "lambda_sweep"]);
    assert!(!o.status.success());
}
