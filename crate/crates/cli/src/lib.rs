//! Command-line front end for dataset generation, training, evaluation and reports.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mrplan::controller::min_pairwise_distance;
use mrplan::experiments::{self, Config, NamedPolicy, Policy, Task};
use mrplan::planner;
use mrplan::runtime::{self, closed_loop, DelayRule};
use mrplan::trainer::{self, TrainOptions};
use mrplan::world::Point;
use mrplan::Error;

#[derive(Debug, Parser)]
#[command(name = "mrplan", version, about = "Multi-robot subgoal planning experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct GlobalArgs {
    /// TOML config, or a result sidecar (.json) to re-run.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (or report input directory).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Planner variant(s) or `expert`; repeat or comma-separate.
    #[arg(long, global = true, value_delimiter = ',')]
    pub variant: Vec<String>,
    /// Checkpoint for the (single) selected variant.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes the training scenes as text.
    Dataset,
    /// Trains a planner by imitation of the assignment expert.
    Train {
        /// Reuse a dataset written by `dataset`.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Point-robot coverage per (variant, N, T_f).
    EvalCoverage,
    /// Point-robot coverage at T_f = 40 s over the robot counts.
    EvalGeneralization,
    /// Closed-loop coverage time over inference delays.
    DelaySweep,
    /// One closed-loop run with trajectory, trace and timing output.
    Simulate {
        #[arg(long)]
        task: Option<Task>,
        /// Total inference delay D, seconds.
        #[arg(long)]
        delay: Option<f64>,
        #[arg(long)]
        robots: Option<usize>,
    },
    /// Checkpoint utilities.
    Weights {
        #[command(subcommand)]
        action: WeightsCommand,
    },
    /// Merges `*_runs.csv` files into a long table and a summary.
    Report {
        /// Results directory; defaults to --out.
        dir: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum WeightsCommand {
    /// Prints the architecture, tensor shapes and content hash.
    Inspect { path: Option<PathBuf> },
}

/// Exit status: 0 ok, 1 user error, 2 internal error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_)
        | Error::InvalidScenario(_)
        | Error::Config(_)
        | Error::Parse(_)
        | Error::Checkpoint(_)
        | Error::Io(_)
        | Error::Json(_) => 1,
        _ => 2,
    }
}

/// Config file plus flag overrides.
pub fn resolve_config(global: &GlobalArgs) -> mrplan::Result<Config> {
    let mut cfg = match &global.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = global.seed {
        cfg.experiment.seed = seed;
        cfg.training.seed = seed;
    }
    if !global.variant.is_empty() {
        cfg.experiment.variants = global.variant.clone();
        if let Some(v) = global.variant.iter().find(|v| *v != experiments::EXPERT) {
            cfg.training.planner.variant = v.parse()?;
        }
    }
    if let Some(path) = &global.checkpoint {
        let planners: Vec<&String> = cfg.experiment.variants.iter().filter(|v| *v != experiments::EXPERT).collect();
        let [variant] = planners.as_slice() else {
            return Err(Error::Config("--checkpoint needs exactly one planner variant".into()));
        };
        cfg.checkpoints.insert((*variant).clone(), path.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(global: &GlobalArgs) -> PathBuf {
    global.out.clone().unwrap_or_else(|| PathBuf::from("results"))
}

fn load_policies(cfg: &Config) -> mrplan::Result<Vec<NamedPolicy>> {
    cfg.experiment.variants.iter().map(|v| experiments::load_policy(v, cfg)).collect()
}

fn announce(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

pub fn run(cli: &Cli) -> mrplan::Result<()> {
    let global = &cli.global;
    if let Command::Report { dir } = &cli.command {
        return report(dir.clone().unwrap_or_else(|| out_dir(global)).as_path());
    }
    if let Command::Weights {
        action: WeightsCommand::Inspect { path },
    } = &cli.command
    {
        let path = path
            .clone()
            .or_else(|| global.checkpoint.clone())
            .ok_or_else(|| Error::Config("weights inspect needs a checkpoint path".into()))?;
        return inspect(&path);
    }
    let cfg = resolve_config(global)?;
    let out = out_dir(global);
    match &cli.command {
        Command::Dataset => {
            let scenes = trainer::generate_dataset(&cfg.training)?;
            fs::create_dir_all(&out)?;
            let path = out.join("dataset.txt");
            fs::write(&path, trainer::dataset_to_text(&scenes, cfg.training.seed)?)?;
            announce(&[path]);
        }
        Command::Train { dataset } => train(&cfg, dataset.as_deref(), &out)?,
        Command::EvalCoverage => {
            let policies = load_policies(&cfg)?;
            let table = experiments::eval_coverage(&cfg, &policies, "eval_coverage")?;
            announce(&experiments::write_results(&out, &table, &cfg, &policies)?);
        }
        Command::EvalGeneralization => {
            let policies = load_policies(&cfg)?;
            let table = experiments::eval_generalization(&cfg, &policies)?;
            announce(&experiments::write_results(&out, &table, &cfg, &policies)?);
        }
        Command::DelaySweep => {
            let policies = load_policies(&cfg)?;
            let policy = policies
                .iter()
                .find(|p| matches!(p.policy, Policy::Planner(_)))
                .ok_or_else(|| Error::Config("the delay sweep needs a planner variant".into()))?;
            let (table, _) = experiments::delay_sweep(&cfg, policy)?;
            announce(&experiments::write_results(&out, &table, &cfg, std::slice::from_ref(policy))?);
        }
        Command::Simulate { task, delay, robots } => simulate(&cfg, *task, *delay, *robots, &out)?,
        Command::Report { .. } | Command::Weights { .. } => unreachable!(),
    }
    Ok(())
}

fn train(cfg: &Config, dataset: Option<&Path>, out: &Path) -> mrplan::Result<()> {
    let tc = &cfg.training;
    let scenes = match dataset {
        Some(path) => {
            let (scenes, seed) = trainer::dataset_from_text(&fs::read_to_string(path)?)?;
            if seed != tc.seed {
                log::warn!("dataset was generated with seed {seed}, training seed is {}", tc.seed);
            }
            scenes
        }
        None => trainer::generate_dataset(tc)?,
    };
    let holdout = trainer::generate_holdout(tc)?;
    let outcome = trainer::train(
        tc,
        &scenes,
        &holdout,
        &TrainOptions {
            out_dir: Some(out.to_path_buf()),
            ..TrainOptions::default()
        },
    )?;
    let path = out.join(format!("{}.ckpt", tc.planner.variant));
    planner::save_checkpoint(&path, &outcome.weights, &trainer::final_meta(tc, &outcome))?;
    let last = outcome.metrics.last().map_or(f64::NAN, |m| m.holdout_loss);
    println!(
        "holdout loss {} -> {}, checkpoint {} ({})",
        outcome.initial_holdout_loss,
        last,
        path.display(),
        experiments::content_hash(&fs::read(&path)?)
    );
    Ok(())
}

fn simulate(cfg: &Config, task: Option<Task>, delay: Option<f64>, robots: Option<usize>, out: &Path) -> mrplan::Result<()> {
    let policies = load_policies(cfg)?;
    let Some(Policy::Planner(weights)) = policies.iter().map(|p| &p.policy).find(|p| matches!(p, Policy::Planner(_))) else {
        return Err(Error::Config("simulate needs a planner variant".into()));
    };
    let spec = &cfg.experiment;
    let task = task.unwrap_or(spec.task);
    let n = robots.unwrap_or(spec.robots[0]);
    let d = delay.unwrap_or(spec.delays[0]);
    let scenario = experiments::eval_scenario(spec, task, n, 0)?;
    let mut cl = cfg.closed_loop.clone();
    cl.network.delay = DelayRule::Constant {
        delay: d / weights.config.layers.max(1) as f64,
    };
    cl.coverage_threshold = spec.threshold;
    cl.record_trace = true;
    let result = closed_loop(&scenario, weights, &cl)?;
    fs::create_dir_all(out)?;
    let files = [
        (out.join("trajectory.csv"), result.log.to_csv()?),
        (out.join("trace.jsonl"), runtime::trace_jsonl(&result.trace)?),
        (out.join("timing.csv"), runtime::timing_report(&result.cycles)?.to_csv()),
    ];
    for (path, text) in &files {
        fs::write(path, text)?;
    }
    let finals: Vec<Point> = result.final_states.iter().map(|s| s.position.clone()).collect();
    let summary = serde_json::json!({
        "task": task,
        "robots": n,
        "delay": d,
        "coverage": result.coverage,
        "min_distance": result.log.min_distance,
        "final_min_distance": min_pairwise_distance(&finals),
        "qp_failures": result.log.qp_failures,
        "solves": result.log.solves,
        "config": cfg,
        "weights": policies.iter().map(|p| serde_json::json!({"variant": p.name, "sha256": p.hash})).collect::<Vec<_>>(),
    });
    let json = out.join("simulate.json");
    fs::write(&json, serde_json::to_string_pretty(&summary)? + "\n")?;
    let mut paths: Vec<PathBuf> = files.into_iter().map(|(p, _)| p).collect();
    paths.push(json);
    announce(&paths);
    Ok(())
}

fn inspect(path: &Path) -> mrplan::Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let (weights, meta) = planner::read_checkpoint(&mut bytes.as_slice())?;
    let layout = weights.layout();
    let tensors: Vec<_> = layout
        .names()
        .iter()
        .zip(layout.shapes())
        .map(|(n, s)| serde_json::json!({"name": n, "shape": s}))
        .collect();
    let info = serde_json::json!({
        "path": path,
        "sha256": experiments::content_hash(&bytes),
        "variant": weights.config.variant,
        "parameters": weights.num_scalars(),
        "config": weights.config,
        "meta": meta,
        "tensors": tensors,
    });
    println!("{}", serde_json::to_string_pretty(&info)?);
    Ok(())
}

fn report(dir: &Path) -> mrplan::Result<()> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("{} is not a directory", dir.display())));
    }
    let report = experiments::build_report(dir)?;
    if report.sources.is_empty() {
        eprintln!("warning: no result files in {}", dir.display());
    }
    experiments::write_report(dir, &report)?;
    println!("{:<16} {:<48} {:<16} {:>6} {:>12} {:>12}", "experiment", "group", "metric", "count", "mean", "std");
    for s in &report.summary {
        println!(
            "{:<16} {:<48} {:<16} {:>6} {:>12.4} {:>12.4}",
            s.experiment, s.group, s.metric, s.count, s.mean, s.std
        );
    }
    Ok(())
}
