use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mrplan::planner::{save_checkpoint, CheckpointMeta, PlannerConfig, PlannerWeights, Variant};

fn mrplan(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrplan"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_weights(dir: &Path, variant: Variant) -> String {
    let cfg = PlannerConfig {
        variant,
        features: 8,
        ..PlannerConfig::default()
    };
    let path = dir.join(format!("{variant}.ckpt"));
    save_checkpoint(&path, &PlannerWeights::init(&cfg, 5).unwrap(), &CheckpointMeta::default()).unwrap();
    path.to_string_lossy().into_owned()
}

const SMALL: &str = "[experiment]\nscenarios = 4\nrobots = [5]\nhorizons = [8.0]\ndelays = [0.0, 0.2]\nreplications = 1\n\n[closed_loop]\nduration = 1.5\n";

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&mrplan(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&mrplan(dir.path(), &["--config", "missing.toml", "eval-coverage"])), 1);
    assert_eq!(code(&mrplan(dir.path(), &["--variant", "gatp_f1", "eval-coverage"])), 1);
    assert_eq!(code(&mrplan(dir.path(), &["--variant", "transformer", "eval-coverage"])), 1);
    fs::write(dir.path().join("bad.toml"), "[experiment]\nreplications = 0\n").unwrap();
    let out = mrplan(dir.path(), &["--config", "bad.toml", "eval-coverage"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("replications"));
    assert_eq!(code(&mrplan(dir.path(), &["weights", "inspect", "nope.ckpt"])), 1);
    assert_eq!(code(&mrplan(dir.path(), &["--help"])), 0);
}

#[test]
fn expert_coverage_is_complete_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL.replace("[8.0]", "[40.0]")).unwrap();
    for out in ["a", "b"] {
        let o = mrplan(dir.path(), &["--config", "c.toml", "--variant", "expert", "--out", out, "eval-coverage"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for file in ["eval_coverage.csv", "eval_coverage_runs.csv", "eval_coverage.json"] {
        assert_eq!(fs::read(dir.path().join("a").join(file)).unwrap(), fs::read(dir.path().join("b").join(file)).unwrap());
    }
    let table = fs::read_to_string(dir.path().join("a/eval_coverage.csv")).unwrap();
    assert_eq!(table.lines().nth(1).unwrap(), "expert,random,5,40,4,100,0,100");
}

#[test]
fn sidecar_rerun_reproduces_results() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = write_weights(dir.path(), Variant::GatpF1);
    fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    let first = mrplan(dir.path(), &["--config", "c.toml", "--checkpoint", &ckpt, "--seed", "3", "--out", "a", "eval-coverage"]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    let again = mrplan(dir.path(), &["--config", "a/eval_coverage.json", "--out", "b", "eval-coverage"]);
    assert_eq!(code(&again), 0, "{}", String::from_utf8_lossy(&again.stderr));
    for file in ["eval_coverage.csv", "eval_coverage_runs.csv", "eval_coverage.json"] {
        assert_eq!(fs::read(dir.path().join("a").join(file)).unwrap(), fs::read(dir.path().join("b").join(file)).unwrap());
    }
    let sidecar: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("a/eval_coverage.json")).unwrap()).unwrap();
    assert_eq!(sidecar["config"]["experiment"]["seed"], 3);
    assert_eq!(sidecar["weights"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn delay_sweep_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = write_weights(dir.path(), Variant::GcnF1);
    fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    let sweep = mrplan(dir.path(), &["--config", "c.toml", "--variant", "gcn_f1", "--checkpoint", &ckpt, "--out", "r", "delay-sweep"]);
    assert_eq!(code(&sweep), 0, "{}", String::from_utf8_lossy(&sweep.stderr));
    let table = fs::read_to_string(dir.path().join("r/delay_sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 2 * 2);
    let cov = mrplan(dir.path(), &["--config", "c.toml", "--variant", "expert", "--out", "r", "eval-coverage"]);
    assert_eq!(code(&cov), 0);
    let report = mrplan(dir.path(), &["report", "r"]);
    assert_eq!(code(&report), 0);
    let long = fs::read_to_string(dir.path().join("r/report_long.csv")).unwrap();
    let inputs: usize = ["r/delay_sweep_runs.csv", "r/eval_coverage_runs.csv"]
        .iter()
        .map(|f| fs::read_to_string(dir.path().join(f)).unwrap().lines().count() - 1)
        .sum();
    assert_eq!(long.lines().count() - 1, inputs);
}

#[test]
fn empty_report_warns_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = mrplan(dir.path(), &["report", "."]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}

#[test]
fn simulate_writes_trajectory_trace_and_timing() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = write_weights(dir.path(), Variant::GatpF1);
    fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    let out = mrplan(
        dir.path(),
        &["--config", "c.toml", "--checkpoint", &ckpt, "--out", "s", "simulate", "--task", "zone", "--delay", "0.2"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let traj = fs::read_to_string(dir.path().join("s/trajectory.csv")).unwrap();
    assert!(traj.starts_with("t,robot,px,py,vx,vy,ux,uy,qp_status,min_neighbor_dist\n"));
    assert_eq!(traj.lines().count(), 1 + 150 * 5);
    let timing = fs::read_to_string(dir.path().join("s/timing.csv")).unwrap();
    let row: Vec<&str> = timing.lines().nth(1).unwrap().split(',').collect();
    assert!((row[4].parse::<f64>().unwrap() - 0.2).abs() < 1e-9);
    let trace = fs::read_to_string(dir.path().join("s/trace.jsonl")).unwrap();
    assert!(trace.lines().any(|l| l.contains("\"type\":\"activate\"")));
}

#[test]
fn dataset_train_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[training]\nnum_graphs = 4\nrobots = 3\nsteps = 3\nbatch_size = 2\nepochs = 1\nlr_final_epochs = 0\nholdout_graphs = 2\n\n[training.planner]\nfeatures = 8\n";
    fs::write(dir.path().join("t.toml"), cfg).unwrap();
    assert_eq!(code(&mrplan(dir.path(), &["--config", "t.toml", "--out", "d", "dataset"])), 0);
    let train = mrplan(dir.path(), &["--config", "t.toml", "--out", "m", "train", "--dataset", "d/dataset.txt"]);
    assert_eq!(code(&train), 0, "{}", String::from_utf8_lossy(&train.stderr));
    assert!(dir.path().join("m/metrics.csv").exists());
    let inspect = mrplan(dir.path(), &["weights", "inspect", "m/gatp_f1.ckpt"]);
    assert_eq!(code(&inspect), 0);
    let info: serde_json::Value = serde_json::from_slice(&inspect.stdout).unwrap();
    assert_eq!(info["variant"], "gatp_f1");
    assert_eq!(info["config"]["features"], 8);
}
