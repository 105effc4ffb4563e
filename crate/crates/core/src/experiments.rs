//! Evaluation grids, result files and report aggregation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::expert;
use crate::planner::{self, load_checkpoint, PlannerWeights, Subgoal, Variant};
use crate::runtime::{closed_loop, ClosedLoopConfig, NetworkModel};
use crate::trainer::TrainingConfig;
use crate::world::{self, make_scenario, CoverageReport, Point, Scenario, ScenarioKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Random,
    Circle,
    Zone,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Random => "random",
            Task::Circle => "circle",
            Task::Zone => "zone",
        }
    }

    /// Goal layout in an `env_size` square: a radius-4 ring about the center, or the
    /// `[0.6, 0.9]` fraction box for the zone.
    pub fn kind(self, env_size: f64, dim: usize) -> ScenarioKind {
        match self {
            Task::Random => ScenarioKind::Random,
            Task::Circle => ScenarioKind::Circle {
                center: vec![env_size / 2.0; dim],
                radius: 4.0,
            },
            Task::Zone => ScenarioKind::Zone {
                min: vec![0.6 * env_size; dim],
                max: vec![0.9 * env_size; dim],
            },
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Task::Random),
            "circle" => Ok(Task::Circle),
            "zone" => Ok(Task::Zone),
            _ => Err(Error::Config(format!("unknown task {s:?} (expected random, circle or zone)"))),
        }
    }
}

/// Experiment grid. Tasks and variants are swept by the commands that use them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub task: Task,
    /// Tasks for the delay sweep.
    pub tasks: Vec<Task>,
    pub robots: Vec<usize>,
    /// Horizons `T_f`, seconds.
    pub horizons: Vec<f64>,
    /// Total inference delays `D`, seconds; each layer waits `D / L`.
    pub delays: Vec<f64>,
    /// Planner variants by name, or `expert` for the assignment oracle.
    pub variants: Vec<String>,
    pub seed: u64,
    pub scenarios: usize,
    pub replications: usize,
    pub env_size: f64,
    pub dim: usize,
    pub threshold: f64,
    /// Point-robot step duration; `None` means `S_p / v_max`.
    pub step_time: Option<f64>,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            task: Task::Random,
            tasks: vec![Task::Circle, Task::Zone],
            robots: vec![10],
            horizons: vec![10.0, 20.0, 30.0, 40.0],
            delays: vec![0.0, 0.1, 0.2, 0.4, 0.6],
            variants: vec![Variant::GatpF1.name().to_string()],
            seed: 0,
            scenarios: 200,
            replications: 10,
            env_size: 20.0,
            dim: 2,
            threshold: world::DEFAULT_COVERAGE_THRESHOLD,
            step_time: None,
            workers: 0,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let empty = [
            ("tasks", self.tasks.is_empty()),
            ("robots", self.robots.is_empty()),
            ("horizons", self.horizons.is_empty()),
            ("delays", self.delays.is_empty()),
            ("variants", self.variants.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::Config(format!("{name} must not be empty")));
        }
        if self.replications == 0 || self.scenarios == 0 {
            return Err(Error::Config("replications and scenarios must be at least 1".into()));
        }
        if self.robots.contains(&0) {
            return Err(Error::Config("robot counts must be positive".into()));
        }
        if self.horizons.iter().any(|t| !(*t > 0.0)) || self.delays.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::Config("horizons must be positive and delays non-negative".into()));
        }
        if !(self.env_size > 0.0) || !(self.threshold > 0.0) || self.step_time.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::Config("env_size, threshold and step_time must be positive".into()));
        }
        for v in &self.variants {
            parse_policy_name(v)?;
        }
        Ok(())
    }
}

/// Everything a command reads: the grid, training, closed-loop settings and checkpoint paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub experiment: ExperimentSpec,
    pub training: TrainingConfig,
    pub closed_loop: ClosedLoopConfig,
    /// Variant name to checkpoint file.
    pub checkpoints: BTreeMap<String, PathBuf>,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a TOML config, or the `config` object of a JSON result sidecar.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            let sidecar: serde_json::Value = serde_json::from_str(&text)?;
            let config = sidecar
                .get("config")
                .ok_or_else(|| Error::Config(format!("{} has no config object", path.display())))?;
            return serde_json::from_value(config.clone()).map_err(|e| Error::Config(e.to_string()));
        }
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment.validate()?;
        self.training.validate()?;
        self.closed_loop.validate()
    }

    pub fn step_time(&self) -> f64 {
        self.experiment
            .step_time
            .unwrap_or(self.training.planner.spatial_horizon / self.closed_loop.controller.v_max)
    }
}

/// What produces subgoals in point-robot evaluation.
#[derive(Debug, Clone)]
pub enum Policy {
    Planner(Box<PlannerWeights>),
    Expert { spatial_horizon: f64 },
}

pub const EXPERT: &str = "expert";

fn parse_policy_name(name: &str) -> Result<()> {
    if name == EXPERT {
        return Ok(());
    }
    name.parse::<Variant>().map(|_| ())
}

impl Policy {
    pub fn subgoals(&self, robots: &[Point], goals: &[Point], env_size: f64) -> Result<Vec<Subgoal>> {
        match self {
            Policy::Planner(w) => Ok(planner::plan(robots, goals, env_size, w)?.subgoals),
            Policy::Expert { spatial_horizon } => Ok(expert::expert_policy(robots, goals, *spatial_horizon, None)?.0),
        }
    }
}

/// A loaded policy with the content hash of the file it came from.
#[derive(Debug, Clone)]
pub struct NamedPolicy {
    pub name: String,
    pub policy: Policy,
    pub checkpoint: Option<PathBuf>,
    pub hash: Option<String>,
}

/// `sha256("blob <len>\0" ‖ bytes)` in hex, the git object-hash layout.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load_policy(name: &str, config: &Config) -> Result<NamedPolicy> {
    parse_policy_name(name)?;
    if name == EXPERT {
        return Ok(NamedPolicy {
            name: name.to_string(),
            policy: Policy::Expert {
                spatial_horizon: config.training.planner.spatial_horizon,
            },
            checkpoint: None,
            hash: None,
        });
    }
    let path = config
        .checkpoints
        .get(name)
        .ok_or_else(|| Error::Checkpoint(format!("no checkpoint configured for variant {name}")))?;
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let (weights, _) = planner::read_checkpoint(&mut bytes.as_slice())?;
    if weights.config.variant.name() != name {
        return Err(Error::Checkpoint(format!(
            "{} holds a {} planner, expected {name}",
            path.display(),
            weights.config.variant
        )));
    }
    Ok(NamedPolicy {
        name: name.to_string(),
        policy: Policy::Planner(Box::new(weights)),
        checkpoint: Some(path.clone()),
        hash: Some(content_hash(&bytes)),
    })
}

pub fn load_weights(path: &Path) -> Result<PlannerWeights> {
    load_checkpoint(path).map(|(w, _)| w)
}

/// Point-robot rollout: every `step_time` each robot jumps to its subgoal. Coverage is measured
/// at `t_final`; the coverage time is the first step at which every goal is covered.
pub fn teleport_rollout(scenario: &Scenario, policy: &Policy, t_final: f64, step_time: f64, threshold: f64) -> Result<CoverageReport> {
    let steps = (t_final / step_time + 1e-9).floor() as usize;
    let mut robots = scenario.robots.clone();
    let mut first = None;
    for k in 0..=steps {
        if first.is_none() && world::covered_goals(&robots, &scenario.goals, threshold).iter().all(|&c| c) {
            first = Some(k as f64 * step_time);
        }
        if k == steps {
            break;
        }
        let subgoals = policy.subgoals(&robots, &scenario.goals, scenario.env_size)?;
        robots = robots.iter().zip(&subgoals).map(|(p, s)| s.target_from(p)).collect();
    }
    let mut report = world::coverage(&robots, &scenario.goals, threshold)?;
    report.coverage_time = first;
    Ok(report)
}

/// Scenario `index` of the fixed evaluation set for one grid cell.
pub fn eval_scenario(spec: &ExperimentSpec, task: Task, robots: usize, index: u64) -> Result<Scenario> {
    make_scenario(&task.kind(spec.env_size, spec.dim), robots, spec.env_size, spec.dim, spec.seed + index)
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Solver(format!("thread pool: {e}")))
}

/// One scalar measurement of one run, the long-format unit of every result file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub group: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

/// A summary table plus the per-run records it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub runs: Vec<RunRecord>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// Coverage percentage per (variant, N, T_f) over the evaluation set.
pub fn eval_coverage(config: &Config, policies: &[NamedPolicy], name: &str) -> Result<Table> {
    let spec = &config.experiment;
    config.validate()?;
    let step_time = config.step_time();
    let mut cells = Vec::new();
    for p in policies {
        for &n in &spec.robots {
            for &t in &spec.horizons {
                cells.push((p, n, t));
            }
        }
    }
    let pool = pool(spec.workers)?;
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for (p, n, t) in cells {
        let reports: Vec<CoverageReport> = pool.install(|| {
            (0..spec.scenarios as u64)
                .into_par_iter()
                .map(|i| {
                    let s = eval_scenario(spec, spec.task, n, i)?;
                    teleport_rollout(&s, &p.policy, t, step_time, spec.threshold)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let group = format!("variant={};task={};robots={n};t_final={}", p.name, spec.task.name(), num(t));
        let pct: Vec<f64> = reports.iter().map(|r| 100.0 * r.fraction).collect();
        let full = reports.iter().filter(|r| r.coverage_time.is_some()).count();
        for (i, (r, c)) in reports.iter().zip(&pct).enumerate() {
            let seed = spec.seed + i as u64;
            let record = |metric: &str, value: f64| RunRecord {
                experiment: name.to_string(),
                group: group.clone(),
                seed,
                metric: metric.to_string(),
                value,
            };
            runs.push(record("coverage_pct", *c));
            runs.push(record("coverage_time", r.coverage_time.unwrap_or(t)));
        }
        let (mean, std) = mean_std(&pct);
        rows.push(vec![
            p.name.clone(),
            spec.task.name().to_string(),
            n.to_string(),
            num(t),
            spec.scenarios.to_string(),
            num(mean),
            num(std),
            num(100.0 * full as f64 / spec.scenarios as f64),
        ]);
    }
    Ok(Table {
        name: name.to_string(),
        header: ["variant", "task", "robots", "t_final", "scenarios", "coverage_mean", "coverage_std", "full_coverage_pct"]
            .map(String::from)
            .to_vec(),
        rows,
        runs,
    })
}

/// Generalization grid: `T_f = 40 s` and the configured robot counts.
pub fn eval_generalization(config: &Config, policies: &[NamedPolicy]) -> Result<Table> {
    let mut cfg = config.clone();
    cfg.experiment.horizons = vec![40.0];
    eval_coverage(&cfg, policies, "eval_generalization")
}

/// Measurements of one closed-loop run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub task: Task,
    pub delay: f64,
    pub replication: usize,
    /// First time every goal was covered, or the run duration when never reached.
    pub coverage_time: f64,
    pub reached: bool,
    pub coverage_pct: f64,
    pub min_distance: f64,
    pub qp_failures: usize,
    pub solves: usize,
    /// Logged samples closer than `0.95·d_safe`.
    pub violations: usize,
    pub timeouts: usize,
}

pub const SAFETY_MARGIN: f64 = 0.95;

pub fn sweep_run(config: &Config, weights: &PlannerWeights, task: Task, delay: f64, replication: usize) -> Result<SweepRun> {
    let spec = &config.experiment;
    let n = spec.robots[0];
    let scenario = eval_scenario(spec, task, n, replication as u64)?;
    let mut cl = config.closed_loop.clone();
    cl.network = NetworkModel {
        delay: crate::runtime::DelayRule::Constant {
            delay: delay / weights.config.layers.max(1) as f64,
        },
        ..cl.network.clone()
    };
    cl.coverage_threshold = spec.threshold;
    let result = closed_loop(&scenario, weights, &cl)?;
    let limit = SAFETY_MARGIN * cl.controller.d_safe;
    Ok(SweepRun {
        task,
        delay,
        replication,
        coverage_time: result.coverage.coverage_time.unwrap_or(cl.duration),
        reached: result.coverage.coverage_time.is_some(),
        coverage_pct: 100.0 * result.coverage.fraction,
        min_distance: result.log.min_distance,
        qp_failures: result.log.qp_failures,
        solves: result.log.solves,
        violations: result.log.rows.iter().filter(|r| r.min_neighbor_dist < limit).count(),
        timeouts: result.cycles.iter().map(|c| c.timeouts).sum(),
    })
}

/// Closed-loop coverage time per (task, D), with `replications` scenarios each.
pub fn delay_sweep(config: &Config, policy: &NamedPolicy) -> Result<(Table, Vec<SweepRun>)> {
    config.validate()?;
    let spec = &config.experiment;
    let Policy::Planner(weights) = &policy.policy else {
        return Err(Error::Config("the delay sweep needs a trained planner".into()));
    };
    let mut jobs = Vec::new();
    for &task in &spec.tasks {
        for &d in &spec.delays {
            for r in 0..spec.replications {
                jobs.push((task, d, r));
            }
        }
    }
    let runs: Vec<SweepRun> = pool(spec.workers)?.install(|| {
        jobs.par_iter()
            .map(|&(task, d, r)| sweep_run(config, weights, task, d, r))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for chunk in runs.chunks(spec.replications) {
        let (task, d) = (chunk[0].task, chunk[0].delay);
        let group = format!("variant={};task={};delay={}", policy.name, task.name(), num(d));
        for r in chunk {
            for (metric, value) in [
                ("coverage_time", r.coverage_time),
                ("coverage_pct", r.coverage_pct),
                ("min_distance", r.min_distance),
                ("qp_failures", r.qp_failures as f64),
                ("violations", r.violations as f64),
                ("timeouts", r.timeouts as f64),
            ] {
                records.push(RunRecord {
                    experiment: "delay_sweep".into(),
                    group: group.clone(),
                    seed: spec.seed + r.replication as u64,
                    metric: metric.into(),
                    value,
                });
            }
        }
        let times: Vec<f64> = chunk.iter().map(|r| r.coverage_time).collect();
        let (mean, std) = mean_std(&times);
        rows.push(vec![
            policy.name.clone(),
            task.name().to_string(),
            num(d),
            chunk.len().to_string(),
            num(mean),
            num(std),
            chunk.iter().filter(|r| r.reached).count().to_string(),
            num(mean_std(&chunk.iter().map(|r| r.coverage_pct).collect::<Vec<_>>()).0),
            num(chunk.iter().map(|r| r.min_distance).fold(f64::INFINITY, f64::min)),
            chunk.iter().map(|r| r.qp_failures).sum::<usize>().to_string(),
            chunk.iter().map(|r| r.violations).sum::<usize>().to_string(),
        ]);
    }
    let header = [
        "variant",
        "task",
        "delay",
        "replications",
        "coverage_time_mean",
        "coverage_time_std",
        "reached",
        "coverage_pct_mean",
        "min_distance",
        "qp_failures",
        "violations",
    ];
    Ok((
        Table {
            name: "delay_sweep".into(),
            header: header.map(String::from).to_vec(),
            rows,
            runs: records,
        },
        runs,
    ))
}

pub fn table_csv(header: &[String], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).map_err(|e| Error::Parse(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

pub const RUNS_SUFFIX: &str = "_runs.csv";

pub fn runs_csv(runs: &[RunRecord]) -> Result<String> {
    let rows: Vec<Vec<String>> = runs
        .iter()
        .map(|r| vec![r.experiment.clone(), r.group.clone(), r.seed.to_string(), r.metric.clone(), num(r.value)])
        .collect();
    table_csv(&["experiment", "group", "seed", "metric", "value"].map(String::from), &rows)
}

pub fn parse_runs_csv(text: &str) -> Result<Vec<RunRecord>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    reader.deserialize().map(|r| r.map_err(csv_err)).collect()
}

#[derive(Debug, Serialize)]
struct WeightsEntry<'a> {
    variant: &'a str,
    checkpoint: Option<&'a Path>,
    sha256: Option<&'a str>,
}

#[derive(Debug, Serialize)]
struct Sidecar<'a> {
    command: &'a str,
    version: &'a str,
    config: &'a Config,
    weights: Vec<WeightsEntry<'a>>,
    files: Vec<String>,
}

/// Writes `<name>.csv`, `<name>_runs.csv` and the `<name>.json` sidecar into `dir`.
pub fn write_results(dir: &Path, table: &Table, config: &Config, policies: &[NamedPolicy]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{}.csv", table.name));
    let runs_path = dir.join(format!("{}{RUNS_SUFFIX}", table.name));
    let json_path = dir.join(format!("{}.json", table.name));
    fs::write(&csv_path, table_csv(&table.header, &table.rows)?)?;
    fs::write(&runs_path, runs_csv(&table.runs)?)?;
    let sidecar = Sidecar {
        command: &table.name,
        version: env!("CARGO_PKG_VERSION"),
        config,
        weights: policies
            .iter()
            .map(|p| WeightsEntry {
                variant: &p.name,
                checkpoint: p.checkpoint.as_deref(),
                sha256: p.hash.as_deref(),
            })
            .collect(),
        files: [&csv_path, &runs_path]
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect(),
    };
    fs::write(&json_path, serde_json::to_string_pretty(&sidecar)? + "\n")?;
    Ok(vec![csv_path, runs_path, json_path])
}

/// Merged runs and their per-(experiment, group, metric) summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub runs: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
    pub sources: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub group: String,
    pub metric: String,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

pub const REPORT_LONG: &str = "report_long.csv";
pub const REPORT_SUMMARY: &str = "report_summary.csv";

pub fn summarize(runs: &[RunRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(&str, &str, &str), Vec<f64>> = BTreeMap::new();
    for r in runs {
        groups
            .entry((&r.experiment, &r.group, &r.metric))
            .or_default()
            .push(r.value);
    }
    groups
        .into_iter()
        .map(|((experiment, group, metric), values)| {
            let (mean, std) = mean_std(&values);
            SummaryRow {
                experiment: experiment.into(),
                group: group.into(),
                metric: metric.into(),
                count: values.len(),
                mean,
                std,
            }
        })
        .collect()
}

/// Merges every `*_runs.csv` under `dir`, in file-name order.
pub fn build_report(dir: &Path) -> Result<Report> {
    let mut sources: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().ends_with(RUNS_SUFFIX)))
        .collect();
    sources.sort();
    let mut runs = Vec::new();
    for path in &sources {
        runs.extend(parse_runs_csv(&fs::read_to_string(path)?)?);
    }
    Ok(Report {
        summary: summarize(&runs),
        runs,
        sources,
    })
}

pub fn write_report(dir: &Path, report: &Report) -> Result<()> {
    fs::write(dir.join(REPORT_LONG), runs_csv(&report.runs)?)?;
    let rows: Vec<Vec<String>> = report
        .summary
        .iter()
        .map(|s| {
            vec![
                s.experiment.clone(),
                s.group.clone(),
                s.metric.clone(),
                s.count.to_string(),
                num(s.mean),
                num(s.std),
            ]
        })
        .collect();
    let header = ["experiment", "group", "metric", "count", "mean", "std"].map(String::from);
    fs::write(dir.join(REPORT_SUMMARY), table_csv(&header, &rows)?)?;
    Ok(())
}

#[cfg(test)]
mod tests;
