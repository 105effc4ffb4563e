use super::*;
use crate::planner::PlannerConfig;

fn small_config() -> Config {
    let mut cfg = Config::default();
    cfg.experiment.scenarios = 6;
    cfg.experiment.robots = vec![4];
    cfg.experiment.horizons = vec![4.0, 40.0];
    cfg.experiment.workers = 2;
    cfg
}

fn expert_policy() -> NamedPolicy {
    NamedPolicy {
        name: EXPERT.into(),
        policy: Policy::Expert { spatial_horizon: 4.0 },
        checkpoint: None,
        hash: None,
    }
}

fn random_policy(variant: Variant) -> NamedPolicy {
    let cfg = PlannerConfig {
        variant,
        features: 8,
        ..PlannerConfig::default()
    };
    NamedPolicy {
        name: variant.name().into(),
        policy: Policy::Planner(Box::new(PlannerWeights::init(&cfg, 3).unwrap())),
        checkpoint: None,
        hash: None,
    }
}

#[test]
fn task_names_round_trip() {
    for t in [Task::Random, Task::Circle, Task::Zone] {
        assert_eq!(t.name().parse::<Task>().unwrap(), t);
    }
    assert!("square".parse::<Task>().is_err());
    let ScenarioKind::Zone { min, max } = Task::Zone.kind(20.0, 2) else { panic!() };
    assert_eq!((min, max), (vec![12.0, 12.0], vec![18.0, 18.0]));
}

#[test]
fn spec_validation() {
    assert!(ExperimentSpec::default().validate().is_ok());
    for bad in [
        ExperimentSpec { robots: vec![], ..Default::default() },
        ExperimentSpec { delays: vec![], ..Default::default() },
        ExperimentSpec { replications: 0, ..Default::default() },
        ExperimentSpec { variants: vec!["mlp".into()], ..Default::default() },
        ExperimentSpec { horizons: vec![-1.0], ..Default::default() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

#[test]
fn config_toml_round_trip_and_rejects_unknown_keys() {
    let mut cfg = small_config();
    cfg.checkpoints.insert("gatp_f1".into(), "w.ckpt".into());
    let text = cfg.to_toml().unwrap();
    assert_eq!(Config::from_toml(&text).unwrap(), cfg);
    let parsed = Config::from_toml("[experiment]\nrobots = [10, 20]\nseed = 7\n").unwrap();
    assert_eq!(parsed.experiment.robots, vec![10, 20]);
    assert_eq!(parsed.experiment.scenarios, 200);
    assert!(Config::from_toml("[experiment]\nrobotz = [1]\n").is_err());
}

#[test]
fn content_hash_uses_git_blob_framing() {
    assert_eq!(content_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
    assert_eq!(content_hash(b"hello\n"), "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4");
}

#[test]
fn step_time_defaults_to_horizon_over_speed() {
    assert_eq!(Config::default().step_time(), 2.0);
}

#[test]
fn expert_teleport_covers_within_step_bound() {
    let spec = ExperimentSpec::default();
    let policy = expert_policy().policy;
    for i in 0..50 {
        let s = eval_scenario(&spec, Task::Random, 10, i).unwrap();
        let worst = expert::hungarian(&expert::CostMatrix::euclidean(&s.robots, &s.goals).unwrap())
            .goal_of_robot
            .iter()
            .enumerate()
            .map(|(r, &g)| world::distance(&s.robots[r], &s.goals[g]))
            .fold(0.0, f64::max);
        let steps = (worst / 4.0).ceil() + 1.0;
        let r = teleport_rollout(&s, &policy, steps * 2.0, 2.0, 0.2).unwrap();
        assert_eq!(r.fraction, 1.0);
        assert!(r.coverage_time.unwrap() <= steps * 2.0);
    }
}

#[test]
fn coverage_table_matches_grid() {
    let cfg = small_config();
    let t = eval_coverage(&cfg, &[expert_policy(), random_policy(Variant::GcnF1)], "eval_coverage").unwrap();
    assert_eq!(t.rows.len(), 2 * 2);
    assert!(t.rows.iter().all(|r| r.len() == t.header.len()));
    assert_eq!(t.rows[1][5], "100");
    assert_eq!(t.runs.len(), 4 * 6 * 2);
    for r in t.runs.iter().filter(|r| r.metric == "coverage_pct") {
        assert!((0.0..=100.0).contains(&r.value));
    }
    let g = eval_generalization(&cfg, &[expert_policy()]).unwrap();
    assert_eq!(g.rows.len(), 1);
    assert_eq!(g.rows[0][3], "40");
}

#[test]
fn coverage_is_independent_of_worker_count() {
    let mut cfg = small_config();
    let policies = [random_policy(Variant::GatpF1)];
    let a = eval_coverage(&cfg, &policies, "x").unwrap();
    cfg.experiment.workers = 1;
    let b = eval_coverage(&cfg, &policies, "x").unwrap();
    assert_eq!(a, b);
}

#[test]
fn mean_std_matches_two_pass_formula() {
    let v = [2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0];
    let (m, s) = mean_std(&v);
    assert_eq!(m, 5.0);
    assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-15);
    assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
    assert!(mean_std(&[]).0.is_nan());
}

#[test]
fn results_are_byte_identical_and_reloadable() {
    let cfg = small_config();
    let policies = [expert_policy()];
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let t = eval_coverage(&cfg, &policies, "eval_coverage").unwrap();
        let files = write_results(&dir.path().join(sub), &t, &cfg, &policies).unwrap();
        files.iter().map(|f| fs::read(f).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(run("a"), run("b"));
    let reloaded = Config::load(&dir.path().join("a/eval_coverage.json")).unwrap();
    assert_eq!(reloaded, cfg);
}

#[test]
fn report_of_empty_dir_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    let r = build_report(dir.path()).unwrap();
    assert!(r.runs.is_empty() && r.summary.is_empty());
    write_report(dir.path(), &r).unwrap();
    assert_eq!(fs::read_to_string(dir.path().join(REPORT_SUMMARY)).unwrap().lines().count(), 1);
}

fn record(experiment: &str, group: &str, seed: u64, metric: &str, value: f64) -> RunRecord {
    RunRecord {
        experiment: experiment.into(),
        group: group.into(),
        seed,
        metric: metric.into(),
        value,
    }
}

#[test]
fn report_merges_and_recomputes_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let a: Vec<RunRecord> = (0..5).map(|s| record("delay_sweep", "d=0", s, "coverage_time", 10.0 + s as f64 * 1.5)).collect();
    let b: Vec<RunRecord> = (0..3)
        .map(|s| record("delay_sweep", "d=0", 10 + s, "coverage_time", 20.0 - s as f64))
        .chain((0..4).map(|s| record("eval", "n=10", s, "coverage_pct", 90.0 + s as f64)))
        .collect();
    fs::write(dir.path().join("a_runs.csv"), runs_csv(&a).unwrap()).unwrap();
    fs::write(dir.path().join("b_runs.csv"), runs_csv(&b).unwrap()).unwrap();
    fs::write(dir.path().join("a.csv"), "ignored\n").unwrap();
    let r = build_report(dir.path()).unwrap();
    assert_eq!(r.runs.len(), a.len() + b.len());
    assert_eq!(r.summary.len(), 2);

    // Spreadsheet-style recomputation: sum, sum of squares, n.
    let col: Vec<f64> = a.iter().chain(&b).filter(|x| x.metric == "coverage_time").map(|x| x.value).collect();
    let n = col.len() as f64;
    let sum: f64 = col.iter().sum();
    let sumsq: f64 = col.iter().map(|x| x * x).sum();
    let std = ((sumsq - sum * sum / n) / (n - 1.0)).sqrt();
    let row = r.summary.iter().find(|s| s.metric == "coverage_time").unwrap();
    assert_eq!(row.count, 8);
    assert!((row.mean - sum / n).abs() < 1e-12);
    assert!((row.std - std).abs() < 1e-9);

    write_report(dir.path(), &r).unwrap();
    let long = fs::read_to_string(dir.path().join(REPORT_LONG)).unwrap();
    assert_eq!(long.lines().count(), 1 + a.len() + b.len());
    assert_eq!(parse_runs_csv(&long).unwrap(), r.runs);
}

#[test]
fn small_delay_sweep_has_one_row_per_cell() {
    let mut cfg = small_config();
    cfg.experiment.delays = vec![0.0, 0.2];
    cfg.experiment.replications = 2;
    cfg.closed_loop.duration = 2.0;
    let policy = random_policy(Variant::GatpF1);
    let (table, runs) = delay_sweep(&cfg, &policy).unwrap();
    assert_eq!(table.rows.len(), 2 * 2);
    assert_eq!(runs.len(), 2 * 2 * 2);
    for r in &runs {
        assert!(r.coverage_time <= 2.0);
        assert!(r.min_distance >= SAFETY_MARGIN * cfg.closed_loop.controller.d_safe);
        assert_eq!(r.violations, 0);
    }
    assert!(delay_sweep(&cfg, &expert_policy()).is_err());
}

#[test]
fn missing_checkpoint_is_reported() {
    let cfg = small_config();
    assert!(matches!(load_policy("gatp_f1", &cfg), Err(Error::Checkpoint(_))));
    let mut cfg = cfg;
    cfg.checkpoints.insert("gatp_f1".into(), "/nonexistent/w.ckpt".into());
    assert!(matches!(load_policy("gatp_f1", &cfg), Err(Error::Checkpoint(_))));
    assert!(load_policy(EXPERT, &cfg).is_ok());
}
