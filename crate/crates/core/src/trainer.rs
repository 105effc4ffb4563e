//! Imitation learning under a scheduled mix of planner and expert actions.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::{expert_policy, Assignment};
use crate::planner::{
    save_checkpoint, stack_graphs, CheckpointMeta, PlannerConfig, PlannerWeights, Subgoal, TapeParams,
};
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor};
use crate::world::{self, make_scenario, Point, Scenario, ScenarioKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub num_graphs: usize,
    pub robots: usize,
    pub env_size: f64,
    /// Rollout length `N_t`.
    pub steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Planner probability per equal block of epochs, non-decreasing.
    pub beta_blocks: Vec<f64>,
    pub alpha1: f64,
    pub alpha2: f64,
    pub lr: f64,
    pub lr_final: f64,
    /// Number of trailing epochs that use `lr_final`.
    pub lr_final_epochs: usize,
    /// Expert displacements are divided by this before entering the loss; `None` means `S_p`.
    pub target_divisor: Option<f64>,
    pub clip_norm: Option<f64>,
    pub freeze_assignment: bool,
    pub holdout_graphs: usize,
    /// Planner probability used for the held-out rollouts.
    pub holdout_beta: f64,
    pub seed: u64,
    pub planner: PlannerConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            num_graphs: 10_000,
            robots: 10,
            env_size: 20.0,
            steps: 70,
            batch_size: 200,
            epochs: 80,
            beta_blocks: vec![0.5, 2.0 / 3.0, 5.0 / 6.0, 1.0],
            alpha1: 5.0,
            alpha2: 4.0,
            lr: 6e-4,
            lr_final: 1e-4,
            lr_final_epochs: 20,
            target_divisor: None,
            clip_norm: None,
            freeze_assignment: false,
            holdout_graphs: 100,
            holdout_beta: 1.0,
            seed: 0,
            planner: PlannerConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.planner.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.num_graphs == 0 || self.robots == 0 || self.steps == 0 || self.batch_size == 0 || self.epochs == 0 {
            return bad("num_graphs, robots, steps, batch_size and epochs must be positive".into());
        }
        if !(self.env_size > 0.0) || !(self.lr > 0.0) || !(self.lr_final > 0.0) {
            return bad("env_size and learning rates must be positive".into());
        }
        if self.beta_blocks.is_empty() {
            return bad("beta_blocks must not be empty".into());
        }
        if self.beta_blocks.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return bad(format!("beta values must lie in [0, 1], got {:?}", self.beta_blocks));
        }
        if self.beta_blocks.windows(2).any(|w| w[1] < w[0]) {
            return bad(format!("beta schedule must be non-decreasing, got {:?}", self.beta_blocks));
        }
        if !(0.0..=1.0).contains(&self.holdout_beta) {
            return bad("holdout_beta must lie in [0, 1]".into());
        }
        if self.alpha1 < 0.0 || self.alpha2 < 0.0 {
            return bad("alpha1 and alpha2 must be non-negative".into());
        }
        if let Some(d) = self.target_divisor {
            if !(d > 0.0) {
                return bad("target_divisor must be positive".into());
            }
        }
        Ok(())
    }

    pub fn divisor(&self) -> f64 {
        self.target_divisor.unwrap_or(self.planner.spatial_horizon)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch + self.lr_final_epochs >= self.epochs {
            self.lr_final
        } else {
            self.lr
        }
    }

    pub fn beta_at(&self, epoch: usize) -> f64 {
        beta_schedule(epoch, self.epochs, &self.beta_blocks)
    }
}

/// Planner probability for `epoch`: the epochs are split into `blocks.len()` equal blocks.
pub fn beta_schedule(epoch: usize, epochs: usize, blocks: &[f64]) -> f64 {
    let k = (epoch * blocks.len() / epochs.max(1)).min(blocks.len() - 1);
    blocks[k]
}

/// `1 + α₁·exp(−α₂·err)`.
pub fn adaptive_weight(err: f64, alpha1: f64, alpha2: f64) -> f64 {
    1.0 + alpha1 * (-alpha2 * err).exp()
}

/// Per-robot choice: planner with probability `beta`, else expert. The result is clamped to the box.
pub fn mixed_policy_step(
    positions: &[Point],
    predicted: &[Subgoal],
    expert: &[Subgoal],
    beta: f64,
    env_size: f64,
    rng: &mut impl Rng,
) -> Vec<Point> {
    positions
        .iter()
        .zip(predicted.iter().zip(expert))
        .map(|(p, (pred, exp))| {
            let chosen = if rng.gen_bool(beta.clamp(0.0, 1.0)) { pred } else { exp };
            chosen.target_from(p).iter().map(|c| c.clamp(0.0, env_size)).collect()
        })
        .collect()
}

/// `(1/(N·B)) Σ w ‖pred − target‖²` over rows, with the weight computed from each row's error.
pub fn weighted_loss(pred: &[Vec<f64>], target: &[Vec<f64>], alpha1: f64, alpha2: f64, normalizer: f64) -> Result<f64> {
    if pred.len() != target.len() || pred.iter().zip(target).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::ShapeMismatch {
            op: "weighted_loss",
            left: vec![pred.len()],
            right: vec![target.len()],
        });
    }
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let sq: f64 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
            adaptive_weight(sq.sqrt(), alpha1, alpha2) * sq
        })
        .sum();
    Ok(total / normalizer)
}

/// Independent stream for graph `graph` in `epoch`; draws do not depend on batching or order.
pub fn graph_rng(seed: u64, epoch: u64, graph: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ graph);
    rng
}

fn graph_seed(seed: u64, index: u64, salt: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(index);
    rng.gen()
}

/// Training scenes; the scene with index `g` depends only on `(seed, g)`.
pub fn generate_dataset(cfg: &TrainingConfig) -> Result<Vec<Scenario>> {
    (0..cfg.num_graphs as u64)
        .map(|g| {
            make_scenario(
                &ScenarioKind::Random,
                cfg.robots,
                cfg.env_size,
                cfg.planner.dim,
                graph_seed(cfg.seed, g, 0),
            )
        })
        .collect()
}

/// Held-out scenes, drawn from a different stream than [`generate_dataset`].
pub fn generate_holdout(cfg: &TrainingConfig) -> Result<Vec<Scenario>> {
    (0..cfg.holdout_graphs as u64)
        .map(|g| {
            make_scenario(
                &ScenarioKind::Random,
                cfg.robots,
                cfg.env_size,
                cfg.planner.dim,
                graph_seed(cfg.seed, g, 0x686f_6c64),
            )
        })
        .collect()
}

/// Header line `num_graphs N n D_w seed`, then one scenario record per graph.
pub fn dataset_to_text(scenes: &[Scenario], seed: u64) -> Result<String> {
    let first = scenes.first().ok_or_else(|| Error::InvalidArgument("empty dataset".into()))?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} {} {} {} {}",
        scenes.len(),
        first.num_robots(),
        first.dim,
        world::fmt_sig9(first.env_size),
        seed
    );
    for s in scenes {
        out.push('\n');
        out.push_str(&s.to_text());
    }
    Ok(out)
}

pub fn dataset_from_text(text: &str) -> Result<(Vec<Scenario>, u64)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty()).peekable();
    let header = lines.next().ok_or_else(|| Error::Parse("empty dataset file".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(Error::Parse(format!("dataset header needs `num_graphs N n D_w seed`, got {header:?}")));
    }
    let bad = |what: &str| Error::Parse(format!("bad {what} in dataset header {header:?}"));
    let count: usize = fields[0].parse().map_err(|_| bad("num_graphs"))?;
    let n: usize = fields[1].parse().map_err(|_| bad("N"))?;
    let dim: usize = fields[2].parse().map_err(|_| bad("n"))?;
    let env_size: f64 = fields[3].parse().map_err(|_| bad("D_w"))?;
    let seed: u64 = fields[4].parse().map_err(|_| bad("seed"))?;
    let mut scenes = Vec::with_capacity(count);
    for g in 0..count {
        let s = world::parse_scenario(&mut lines).map_err(|e| Error::Parse(format!("graph {g}: {e}")))?;
        if s.num_robots() != n || s.dim != dim || s.env_size != env_size {
            return Err(Error::Parse(format!("graph {g} disagrees with the dataset header")));
        }
        scenes.push(s);
    }
    if lines.next().is_some() {
        return Err(Error::Parse("trailing content after the last graph".into()));
    }
    Ok((scenes, seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub beta: f64,
    pub lr: f64,
    pub holdout_loss: f64,
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,loss,beta,lr,holdout_loss\n");
    for m in rows {
        let _ = writeln!(out, "{},{:.9e},{:.9e},{:.9e},{:.9e}", m.epoch, m.loss, m.beta, m.lr, m.holdout_loss);
    }
    out
}

/// Outcome of rolling one batch of scenes forward.
#[derive(Debug, Clone)]
pub struct BatchRollout {
    /// Loss of the batch, `(1/(N·B)) Σ_t Σ_i w ‖s̃ − s̃*‖²`.
    pub loss: f64,
    /// Gradients of `loss`, present when requested.
    pub grads: Option<Vec<Tensor>>,
    pub final_positions: Vec<Vec<Point>>,
}

/// Rolls every scene in `scenes` for `cfg.steps` steps in lockstep under the mixed policy.
///
/// Visited states are treated as data: gradients flow through each step's prediction but not
/// through the state transition.
pub fn rollout_batch(
    scenes: &[&Scenario],
    weights: &PlannerWeights,
    cfg: &TrainingConfig,
    beta: f64,
    rngs: &mut [ChaCha8Rng],
    with_grads: bool,
) -> Result<BatchRollout> {
    let pc = &weights.config;
    let n = cfg.robots;
    let b = scenes.len();
    let normalizer = (n * b) as f64;
    let divisor = cfg.divisor();
    if let Some(k) = weights.tensors.iter().position(|t| !t.is_finite()) {
        return Err(Error::Diverged(format!("non-finite values in {}", weights.layout().names()[k])));
    }
    let mut positions: Vec<Vec<Point>> = scenes.iter().map(|s| s.robots.clone()).collect();
    let mut frozen: Vec<Option<Assignment>> = vec![None; b];
    let mut grads: Option<Vec<Tensor>> = with_grads.then(|| weights.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect());
    let mut loss = 0.0;
    for step in 0..cfg.steps {
        let pairs: Vec<(&[Point], &[Point])> = positions
            .iter()
            .zip(scenes)
            .map(|(p, s)| (p.as_slice(), s.goals.as_slice()))
            .collect();
        let stack = stack_graphs(&pairs, cfg.env_size, pc)?;
        let mut experts = Vec::with_capacity(b);
        let mut target = Vec::with_capacity(b * n * pc.dim);
        for (g, (robots, goals)) in pairs.iter().enumerate() {
            let (subgoals, assignment) = expert_policy(robots, goals, pc.spatial_horizon, frozen[g].as_ref())?;
            if cfg.freeze_assignment && frozen[g].is_none() {
                frozen[g] = Some(assignment);
            }
            for s in &subgoals {
                target.extend(s.displacement.iter().map(|v| v / divisor));
            }
            experts.push(subgoals);
        }
        let target = Tensor::new(vec![b * n, pc.dim], target)?;

        let mut tape = Tape::new();
        let params = TapeParams::register(&mut tape, weights);
        let x = tape.constant(stack.features);
        let (_, out) = params.forward(&mut tape, x, &stack.neighbors, stack.degree)?;
        let pred = tape.value(out).clone();
        let row_weights: Vec<f64> = (0..b * n)
            .map(|r| {
                let sq: f64 = pred.row(r).iter().zip(target.row(r)).map(|(a, t)| (a - t) * (a - t)).sum();
                adaptive_weight(sq.sqrt(), cfg.alpha1, cfg.alpha2)
            })
            .collect();
        let tv = tape.constant(target);
        let l = tape.mse(out, tv, &row_weights, 1.0 / normalizer)?;
        let lv = tape.value(l).item();
        if !lv.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss {lv} at rollout step {step}")));
        }
        loss += lv;
        if let Some(acc) = grads.as_mut() {
            let g = tape.backward(l)?;
            for (a, gi) in acc.iter_mut().zip(&g.params) {
                for (x, y) in a.data_mut().iter_mut().zip(gi.data()) {
                    *x += y;
                }
            }
        }

        for g in 0..b {
            let predicted: Vec<Subgoal> = (0..n)
                .map(|i| crate::planner::scale_output(pred.row(g * n + i), pc.spatial_horizon, pc.clamp_mode))
                .collect();
            positions[g] = mixed_policy_step(&positions[g], &predicted, &experts[g], beta, cfg.env_size, &mut rngs[g]);
        }
    }
    Ok(BatchRollout {
        loss,
        grads,
        final_positions: positions,
    })
}

/// Mean per-batch loss over held-out scenes, rolled out with `cfg.holdout_beta`.
pub fn holdout_loss(holdout: &[Scenario], weights: &PlannerWeights, cfg: &TrainingConfig) -> Result<f64> {
    if holdout.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    let mut batches = 0;
    for (k, chunk) in holdout.chunks(cfg.batch_size).enumerate() {
        let refs: Vec<&Scenario> = chunk.iter().collect();
        let mut rngs: Vec<ChaCha8Rng> = (0..chunk.len())
            .map(|i| graph_rng(cfg.seed ^ 0x686f_6c64, 0, (k * cfg.batch_size + i) as u64))
            .collect();
        total += rollout_batch(&refs, weights, cfg, cfg.holdout_beta, &mut rngs, false)?.loss;
        batches += 1;
    }
    Ok(total / batches as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: PlannerWeights,
    pub metrics: Vec<EpochMetrics>,
    pub initial_holdout_loss: f64,
    pub steps: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for `epoch_XXX.ckpt` files and `metrics.csv`.
    pub out_dir: Option<PathBuf>,
    pub adam: AdamConfig,
}

fn checkpoint_meta(cfg: &TrainingConfig, adam: &AdamConfig, epoch: usize, steps: u64) -> CheckpointMeta {
    CheckpointMeta {
        optimizer: "adam".into(),
        adam_beta1: adam.beta1,
        adam_beta2: adam.beta2,
        adam_eps: adam.eps,
        seed: cfg.seed,
        epoch,
        steps,
        notes: String::new(),
    }
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.ckpt"))
}

/// Full training run over `dataset`.
pub fn train(cfg: &TrainingConfig, dataset: &[Scenario], holdout: &[Scenario], opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if let Some(bad) = dataset.iter().chain(holdout).find(|s| s.num_robots() != cfg.robots || s.dim != cfg.planner.dim) {
        return Err(Error::InvalidArgument(format!(
            "scene with {} robots in {} dimensions, config expects {} in {}",
            bad.num_robots(),
            bad.dim,
            cfg.robots,
            cfg.planner.dim
        )));
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut weights = PlannerWeights::init(&cfg.planner, cfg.seed)?;
    let mut adam = AdamState::new(&weights.tensors);
    let initial_holdout_loss = holdout_loss(holdout, &weights, cfg)?;
    log::info!("initial holdout loss {initial_holdout_loss:.6}");
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.epochs {
        let beta = cfg.beta_at(epoch);
        let lr = cfg.lr_at(epoch);
        let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle.set_stream(0x7368_7566 ^ epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for (k, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let scenes: Vec<&Scenario> = chunk.iter().map(|&g| &dataset[g]).collect();
            let mut rngs: Vec<ChaCha8Rng> = chunk.iter().map(|&g| graph_rng(cfg.seed, epoch as u64, g as u64)).collect();
            let rollout = rollout_batch(&scenes, &weights, cfg, beta, &mut rngs, true)
                .map_err(|e| match e {
                    Error::Diverged(m) => Error::Diverged(format!("epoch {epoch}, batch {k}: {m}")),
                    other => other,
                })?;
            let mut grads = rollout.grads.expect("gradients requested");
            if let Some(max_norm) = cfg.clip_norm {
                let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
                if norm > max_norm {
                    let s = max_norm / norm;
                    grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
                }
            }
            adam_step(&mut weights.tensors, &grads, &mut adam, lr, &opts.adam)?;
            if weights.tensors.iter().any(|t| !t.is_finite()) {
                return Err(Error::Diverged(format!("non-finite weights after epoch {epoch}, batch {k}")));
            }
            epoch_loss += rollout.loss;
            batches += 1;
        }
        let holdout_loss = holdout_loss(holdout, &weights, cfg)?;
        let row = EpochMetrics {
            epoch,
            loss: epoch_loss / batches as f64,
            beta,
            lr,
            holdout_loss,
        };
        log::info!(
            "epoch {epoch} loss {:.6} holdout {:.6} beta {beta:.3} lr {lr:e}",
            row.loss,
            row.holdout_loss
        );
        metrics.push(row);
        if let Some(dir) = &opts.out_dir {
            save_checkpoint(&checkpoint_path(dir, epoch), &weights, &checkpoint_meta(cfg, &opts.adam, epoch, adam.step))?;
            std::fs::write(dir.join("metrics.csv"), metrics_csv(&metrics))?;
        }
    }
    Ok(TrainOutcome {
        weights,
        metrics,
        initial_holdout_loss,
        steps: adam.step,
    })
}

/// Checkpoint metadata for the final weights of a run.
pub fn final_meta(cfg: &TrainingConfig, outcome: &TrainOutcome) -> CheckpointMeta {
    checkpoint_meta(cfg, &AdamConfig::default(), cfg.epochs.saturating_sub(1), outcome.steps)
}
