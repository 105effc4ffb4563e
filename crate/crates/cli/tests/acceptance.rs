//! Acceptance suite. Prints one line per criterion and exits non-zero if any fails.
//!
//! Trained weights are read from `checkpoints/<variant>.ckpt` at the workspace root. When a
//! checkpoint is missing or its `<variant>.toml` differs from the desk-scale config below, the
//! variant is retrained there first (about an hour per variant on one core).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mrplan::controller::qp::{solve_qp, Constraints, QpStatus};
use mrplan::controller::reference::{MinJerk, PEAK_RATE};
use mrplan::experiments::{self, Config, NamedPolicy, Policy, SweepRun, Task, SAFETY_MARGIN};
use mrplan::expert::{self, CostMatrix};
use mrplan::planner::{
    self, load_checkpoint, observation_features, save_checkpoint, PlannerConfig, PlannerWeights, TapeParams, Variant,
};
use mrplan::runtime::{run_replan_cycle, NetworkModel, RuntimeState};
use mrplan::tensor::{Tape, Tensor};
use mrplan::trainer::{self, TrainOptions, TrainingConfig};
use mrplan::world::{self, make_scenario, ScenarioKind};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn desk_training(variant: Variant) -> TrainingConfig {
    TrainingConfig {
        num_graphs: 2000,
        epochs: 40,
        batch_size: 10,
        lr_final_epochs: 10,
        holdout_graphs: 100,
        planner: PlannerConfig {
            variant,
            ..PlannerConfig::default()
        },
        ..TrainingConfig::default()
    }
}

/// Desk-scale weights for `variant`, trained on demand.
fn trained(variant: Variant) -> PlannerWeights {
    let dir = root().join("checkpoints");
    let cfg = desk_training(variant);
    let manifest = toml::to_string(&cfg).unwrap();
    let path = dir.join(format!("{variant}.ckpt"));
    let manifest_path = dir.join(format!("{variant}.toml"));
    let fresh = fs::read_to_string(&manifest_path).map(|m| m == manifest).unwrap_or(false);
    if fresh {
        if let Ok((w, _)) = load_checkpoint(&path) {
            if w.config == cfg.planner {
                return w;
            }
        }
    }
    eprintln!("training {variant} at desk scale into {}", dir.display());
    fs::create_dir_all(&dir).unwrap();
    let data = trainer::generate_dataset(&cfg).unwrap();
    let holdout = trainer::generate_holdout(&cfg).unwrap();
    let out = trainer::train(&cfg, &data, &holdout, &TrainOptions::default()).unwrap();
    save_checkpoint(&path, &out.weights, &trainer::final_meta(&cfg, &out)).unwrap();
    fs::write(&manifest_path, manifest).unwrap();
    out.weights
}

fn planner_policy(weights: PlannerWeights) -> NamedPolicy {
    NamedPolicy {
        name: weights.config.variant.name().into(),
        policy: Policy::Planner(Box::new(weights)),
        checkpoint: None,
        hash: None,
    }
}

// 1. Assignment optimality.

fn brute_force(cost: &CostMatrix) -> f64 {
    fn go(cost: &CostMatrix, row: usize, used: &mut Vec<bool>, perm: &mut Vec<usize>, best: &mut f64) {
        let n = cost.size();
        if row == n {
            *best = best.min(cost.cost_of(perm));
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                perm.push(j);
                go(cost, row + 1, used, perm, best);
                perm.pop();
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost.size()], &mut Vec::new(), &mut best);
    best
}

fn assignment_optimality() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for n in 2..=7 {
        for i in 0..500 {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    (0..n)
                        .map(|_| if i % 3 == 0 { rng.gen_range(0..4) as f64 } else { rng.gen_range(0.0..10.0) })
                        .collect()
                })
                .collect();
            let cost = CostMatrix::new(&rows).unwrap();
            let a = expert::hungarian(&cost);
            let mut seen = a.goal_of_robot.clone();
            seen.sort_unstable();
            if seen != (0..n).collect::<Vec<_>>() || cost.cost_of(&a.goal_of_robot) != brute_force(&cost) {
                mismatches += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(mismatches == 0 && secs < 10.0, format!("3000 instances, {mismatches} mismatches, {secs:.2} s"))
}

// 2. Gradient correctness.

fn planner_loss(weights: &PlannerWeights, features: &Tensor, neighbors: &[usize], degree: usize, target: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let params = TapeParams::register(&mut tape, weights);
    let x = tape.constant(features.clone());
    let t = tape.constant(target.clone());
    let (_, out) = params.forward(&mut tape, x, neighbors, degree).unwrap();
    let loss = tape.mse(out, t, &vec![1.0; features.rows()], 1.0).unwrap();
    tape.value(loss).item()
}

fn gradient_correctness() -> Outcome {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for instance in 0..50u64 {
        let variant = Variant::ALL[instance as usize % 3];
        let cfg = PlannerConfig {
            variant,
            features: 8,
            ..PlannerConfig::default()
        };
        let weights = PlannerWeights::init(&cfg, 100 + instance).unwrap();
        let s = make_scenario(&ScenarioKind::Random, 4, 20.0, 2, 500 + instance).unwrap();
        let adjacency = world::build_adjacency(&s.robots, cfg.max_neighbors);
        let (neighbors, degree) = planner::neighbor_table(&adjacency).unwrap();
        let features = observation_features(&s.robots, &s.goals, s.env_size, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(instance);
        let target = Tensor::new(vec![4, 2], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();

        let mut tape = Tape::new();
        let params = TapeParams::register(&mut tape, &weights);
        let x = tape.constant(features.clone());
        let t = tape.constant(target.clone());
        let (_, out) = params.forward(&mut tape, x, &neighbors, degree).unwrap();
        let loss = tape.mse(out, t, &[1.0; 4], 1.0).unwrap();
        let grads = tape.backward(loss).unwrap();

        for (k, tensor) in weights.tensors.iter().enumerate() {
            for i in 0..tensor.len() {
                let mut plus = weights.clone();
                plus.tensors[k].data_mut()[i] += h;
                let mut minus = weights.clone();
                minus.tensors[k].data_mut()[i] -= h;
                let fd = (planner_loss(&plus, &features, &neighbors, degree, &target)
                    - planner_loss(&minus, &features, &neighbors, degree, &target))
                    / (2.0 * h);
                let ad = grads.params[k].data()[i];
                let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-6);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    outcome(worst < 1e-4, format!("{checked} parameters, worst relative error {worst:.2e}"))
}

// 3. Permutation equivariance.

fn permutation_equivariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = 0;
    for case in 0..100u64 {
        let n = rng.gen_range(2..=12);
        let variant = Variant::ALL[case as usize % 3];
        let cfg = PlannerConfig {
            variant,
            features: 16,
            ..PlannerConfig::default()
        };
        let w = PlannerWeights::init(&cfg, rng.gen()).unwrap();
        let s = make_scenario(&ScenarioKind::Random, n, 20.0, 2, 1000 + case).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let relabeled: Vec<_> = perm.iter().map(|&p| s.robots[p].clone()).collect();
        let a = planner::plan(&s.robots, &s.goals, s.env_size, &w).unwrap();
        let b = planner::plan(&relabeled, &s.goals, s.env_size, &w).unwrap();
        if (0..n).any(|i| b.normalized[i] != a.normalized[perm[i]]) {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("100 cases, {failures} not bitwise equal"))
}

// 4. Zero-delay equivalence.

fn zero_delay_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = 0;
    for case in 0..100u64 {
        let n = rng.gen_range(1..=12);
        let cfg = PlannerConfig {
            variant: Variant::ALL[case as usize % 3],
            ..PlannerConfig::default()
        };
        let w = PlannerWeights::init(&cfg, rng.gen()).unwrap();
        let s = make_scenario(&ScenarioKind::Random, n, 20.0, 2, 2000 + case).unwrap();
        let central = planner::plan(&s.robots, &s.goals, s.env_size, &w).unwrap();
        let mut state = RuntimeState::new(n);
        let c = run_replan_cycle(&s.robots, &s.goals, s.env_size, &w, &NetworkModel::default(), 0, 0.0, &mut state).unwrap();
        let same = c.normalized == central.normalized
            && c.subgoals.iter().zip(&central.subgoals).all(|(a, b)| a.displacement == b.displacement);
        if !same {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("100 cases, {failures} not bitwise equal"))
}

// 5. Expert convergence.

fn expert_convergence() -> Outcome {
    let spec = experiments::ExperimentSpec::default();
    let policy = Policy::Expert { spatial_horizon: 4.0 };
    let step_time = 2.0;
    let mut failures = 0;
    let mut worst_steps = 0.0f64;
    for seed in 0..200 {
        let s = make_scenario(&ScenarioKind::Random, 10, spec.env_size, 2, seed).unwrap();
        let assignment = expert::hungarian(&CostMatrix::euclidean(&s.robots, &s.goals).unwrap());
        let max_distance = assignment
            .goal_of_robot
            .iter()
            .enumerate()
            .map(|(r, &g)| world::distance(&s.robots[r], &s.goals[g]))
            .fold(0.0, f64::max);
        let steps = (max_distance / 4.0).ceil() + 1.0;
        worst_steps = worst_steps.max(steps);
        let r = experiments::teleport_rollout(&s, &policy, steps * step_time, step_time, 0.2).unwrap();
        if r.fraction != 1.0 {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("200 seeds, {failures} incomplete, step bound up to {worst_steps}"))
}

// 6 and 7. Coverage of trained planners.

fn coverage_at(weights: &PlannerWeights, robots: usize) -> f64 {
    let mut cfg = Config::default();
    cfg.experiment.robots = vec![robots];
    cfg.experiment.horizons = vec![40.0];
    let table = experiments::eval_coverage(&cfg, &[planner_policy(weights.clone())], "acceptance").unwrap();
    table.rows[0][5].parse().unwrap()
}

fn desk_training_coverage(f1: &PlannerWeights) -> Outcome {
    let c = coverage_at(f1, 10);
    outcome(c >= 85.0, format!("gatp_f1 N=10 T_f=40: {c:.2}% (floor 85%)"))
}

fn ablation_trend(f1: &PlannerWeights) -> Outcome {
    let gcn = trained(Variant::GcnF1);
    let f2 = trained(Variant::GatpF2);
    let at10 = [coverage_at(f1, 10), coverage_at(&gcn, 10), coverage_at(&f2, 10)];
    let at50 = [coverage_at(f1, 50), coverage_at(&gcn, 50), coverage_at(&f2, 50)];
    outcome(
        at50[0] > at50[1],
        format!(
            "N=50: gatp_f1 {:.2}%, gcn_f1 {:.2}%, gatp_f2 {:.2}% (N=10: {:.2}%, {:.2}%, {:.2}%)",
            at50[0], at50[1], at50[2], at10[0], at10[1], at10[2]
        ),
    )
}

// 8 and 9. Closed-loop delay sweep.

fn safety(runs: &[SweepRun], d_safe: f64) -> Outcome {
    let min = runs.iter().map(|r| r.min_distance).fold(f64::INFINITY, f64::min);
    let violations: usize = runs.iter().map(|r| r.violations).sum();
    let failures: usize = runs.iter().map(|r| r.qp_failures).sum();
    let solves: usize = runs.iter().map(|r| r.solves).sum();
    let clean_violations: usize = runs.iter().filter(|r| r.qp_failures == 0).map(|r| r.violations).sum();
    outcome(
        min >= SAFETY_MARGIN * d_safe && clean_violations == 0,
        format!(
            "{} runs, min distance {min:.4} m (limit {:.3}), {violations} violating samples, {failures}/{solves} QP failures",
            runs.len(),
            SAFETY_MARGIN * d_safe
        ),
    )
}

fn delay_trend(runs: &[SweepRun]) -> Outcome {
    let mut means: BTreeMap<(&str, String), (f64, usize, usize)> = BTreeMap::new();
    for r in runs {
        let e = means.entry((r.task.name(), format!("{}", r.delay))).or_insert((0.0, 0, 0));
        e.0 += r.coverage_time;
        e.1 += 1;
        e.2 += r.reached as usize;
    }
    let mean = |task: &str, d: &str| {
        let (sum, n, _) = means[&(task, d.to_string())];
        sum / n as f64
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for task in [Task::Circle, Task::Zone] {
        let t = task.name();
        let base = mean(t, "0");
        let inc = |d: &str| mean(t, d) / base - 1.0;
        let (i2, i6) = (inc("0.2"), inc("0.6"));
        pass &= i6 >= 0.15 && i2 < i6;
        let reached: Vec<String> = ["0", "0.1", "0.2", "0.4", "0.6"]
            .iter()
            .map(|d| format!("{}", means[&(t, d.to_string())].2))
            .collect();
        parts.push(format!(
            "{t}: mean {base:.2} s at D=0, {:+.1}% at 0.2, {:+.1}% at 0.6 (reached {})",
            100.0 * i2,
            100.0 * i6,
            reached.join("/")
        ));
    }
    outcome(pass, parts.join("; "))
}

// 10. QP solver.

/// Primal active-set method on the KKT system, started from a known feasible point.
fn active_set_oracle(g: &DMatrix<f64>, a: &DVector<f64>, c: &DMatrix<f64>, b: &DVector<f64>, x0: DVector<f64>) -> Option<DVector<f64>> {
    let n = g.nrows();
    let m = c.nrows();
    let mut x = x0;
    let mut working: Vec<usize> = (0..m).filter(|&i| (c.row(i) * &x)[0] - b[i] <= 1e-12).collect();
    for _ in 0..20 * (n + m) {
        let w = working.len();
        let mut kkt = DMatrix::zeros(n + w, n + w);
        kkt.view_mut((0, 0), (n, n)).copy_from(g);
        for (k, &i) in working.iter().enumerate() {
            for j in 0..n {
                kkt[(j, n + k)] = -c[(i, j)];
                kkt[(n + k, j)] = c[(i, j)];
            }
        }
        let grad = g * &x + a;
        let mut rhs = DVector::zeros(n + w);
        rhs.rows_mut(0, n).copy_from(&(-grad));
        let sol = kkt.lu().solve(&rhs)?;
        let p = sol.rows(0, n).into_owned();
        if p.amax() < 1e-12 {
            let lambda = sol.rows(n, w);
            match lambda.iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1)) {
                Some((k, &l)) if l < -1e-12 => {
                    working.remove(k);
                }
                _ => return Some(x),
            }
            continue;
        }
        let mut step = 1.0;
        let mut blocking = None;
        for i in (0..m).filter(|i| !working.contains(i)) {
            let cp = (c.row(i) * &p)[0];
            if cp < -1e-14 {
                let t = (b[i] - (c.row(i) * &x)[0]) / cp;
                if t < step {
                    step = t.max(0.0);
                    blocking = Some(i);
                }
            }
        }
        x += step * &p;
        if let Some(i) = blocking {
            working.push(i);
        }
    }
    None
}

fn qp_solver() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst_kkt: f64 = 0.0;
    let mut worst_obj: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=40);
        let m_extra = rng.gen_range(0..=n);
        let f = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let g = f.transpose() * &f + DMatrix::identity(n, n) * rng.gen_range(0.05..1.0);
        let a = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
        let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-0.5..0.5));
        let bound = rng.gen_range(0.6..2.0);
        let mut cons = Constraints::new(n);
        cons.push_box(-bound, bound);
        for _ in 0..m_extra {
            let row: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let at_x0: f64 = row.iter().zip(x0.iter()).map(|(r, x)| r * x).sum();
            cons.push(&row, at_x0 - rng.gen_range(0.0..0.5));
        }
        let m = cons.len();
        let c = DMatrix::from_row_slice(m, n, &cons.rows);
        let b = DVector::from_column_slice(&cons.bounds);
        let g_flat: Vec<f64> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| g[(i, j)]).collect();
        let sol = solve_qp(&g_flat, a.as_slice(), &cons).unwrap();
        if sol.status != QpStatus::Optimal {
            failures += 1;
            continue;
        }
        let x = DVector::from_column_slice(&sol.x);
        let lambda = DVector::from_column_slice(&sol.duals);
        let slack = &c * &x - &b;
        let stationarity = (&g * &x + &a - c.transpose() * &lambda).amax();
        let primal = slack.iter().fold(0.0f64, |acc, s| acc.max(-s));
        let dual = lambda.iter().fold(0.0f64, |acc, l| acc.max(-l));
        let complementarity = slack.iter().zip(lambda.iter()).fold(0.0f64, |acc, (s, l)| acc.max((s * l).abs()));
        worst_kkt = worst_kkt.max(stationarity.max(primal).max(dual).max(complementarity));
        let objective = |x: &DVector<f64>| 0.5 * x.dot(&(&g * x)) + a.dot(x);
        match active_set_oracle(&g, &a, &c, &b, x0) {
            Some(xo) => worst_obj = worst_obj.max((objective(&x) - objective(&xo)).abs()),
            None => failures += 1,
        }
    }
    outcome(
        failures == 0 && worst_kkt <= 1e-6 && worst_obj <= 1e-6,
        format!("1000 problems, worst KKT residual {worst_kkt:.2e}, worst objective gap {worst_obj:.2e}, {failures} failures"),
    )
}

// 11. Minimum-jerk reference.

fn min_jerk() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut failures = 0;
    let mut worst_end: f64 = 0.0;
    for _ in 0..100 {
        let v_max = rng.gen_range(0.5..3.0);
        let min_duration = 0.5;
        // Long enough that the speed limit, not the minimum duration, sets the segment length.
        let length = rng.gen_range(min_duration * v_max / PEAK_RATE * 1.01..10.0);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let from = vec![rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0)];
        let target = vec![from[0] + length * angle.cos(), from[1] + length * angle.sin()];
        let seg = MinJerk::rest_to_rest(&from, &target, v_max, min_duration);
        let peak = (0..=2000)
            .map(|k| seg.duration * k as f64 / 2000.0)
            .chain([seg.duration / 2.0])
            .map(|t| world::norm(&seg.sample(t).velocity))
            .fold(0.0, f64::max);
        let end = seg.sample(seg.duration);
        let end_err = world::norm(&end.velocity).max(world::norm(&end.acceleration));
        worst_end = worst_end.max(end_err);
        if !(peak >= v_max - 1e-9 && peak <= v_max) || end_err >= 1e-9 || world::distance(&end.position, &target) > 1e-9 {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("100 segments, {failures} failures, worst endpoint rate {worst_end:.1e}"))
}

// 12. CLI determinism.

fn cli_determinism(f1: &PlannerWeights) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("gatp_f1.ckpt");
    save_checkpoint(&ckpt, f1, &Default::default()).unwrap();
    let config = "[experiment]\nscenarios = 20\nrobots = [10]\nhorizons = [20.0, 40.0]\ndelays = [0.0, 0.2]\nreplications = 2\n\n[closed_loop]\nduration = 10.0\n";
    fs::write(dir.path().join("c.toml"), config).unwrap();
    let ckpt = ckpt.to_string_lossy().into_owned();
    let runs: [&[&str]; 3] = [
        &["eval-coverage"],
        &["delay-sweep"],
        &["simulate", "--task", "circle", "--delay", "0.2"],
    ];
    let mut compared = 0;
    let mut differing = Vec::new();
    for (k, verb) in runs.iter().enumerate() {
        for out in ["a", "b"] {
            let out = format!("{out}{k}");
            let status = Command::new(env!("CARGO_BIN_EXE_mrplan"))
                .current_dir(dir.path())
                .args(["--config", "c.toml", "--checkpoint", &ckpt, "--seed", "7", "--out", &out])
                .args(*verb)
                .output()
                .unwrap();
            if !status.status.success() {
                return outcome(false, format!("{verb:?} failed: {}", String::from_utf8_lossy(&status.stderr)));
            }
        }
        for entry in fs::read_dir(dir.path().join(format!("a{k}"))).unwrap() {
            let name = entry.unwrap().file_name();
            let a = fs::read(dir.path().join(format!("a{k}")).join(&name)).unwrap();
            let b = fs::read(dir.path().join(format!("b{k}")).join(&name)).ok();
            compared += 1;
            if b.as_deref() != Some(a.as_slice()) {
                differing.push(name.to_string_lossy().into_owned());
            }
        }
    }
    outcome(differing.is_empty(), format!("{compared} files from 3 commands, differing: {differing:?}"))
}

/// Runs every criterion, or only the numbers given on the command line.
fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: usize| only.is_empty() || only.contains(&id);
    let mut all = true;
    let mut report = |id: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(id) {
            return;
        }
        let start = Instant::now();
        let o = f();
        all &= o.pass;
        println!(
            "criterion {id:>2} {name}: {} ({}; {:.1} s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    };
    report(1, "assignment optimality", &mut assignment_optimality);
    report(2, "gradient correctness", &mut gradient_correctness);
    report(3, "permutation equivariance", &mut permutation_equivariance);
    report(4, "zero-delay equivalence", &mut zero_delay_equivalence);
    report(5, "expert convergence", &mut expert_convergence);
    report(10, "qp solver", &mut qp_solver);
    report(11, "min-jerk", &mut min_jerk);

    if [6, 7, 8, 9, 12].iter().any(|&id| wanted(id)) {
        let f1 = trained(Variant::GatpF1);
        report(6, "desk-scale training", &mut || desk_training_coverage(&f1));
        report(7, "ablation trend", &mut || ablation_trend(&f1));
        if wanted(8) || wanted(9) {
            let config = Config::default();
            let (_, runs) = experiments::delay_sweep(&config, &planner_policy(f1.clone())).unwrap();
            report(8, "safety", &mut || safety(&runs, config.closed_loop.controller.d_safe));
            report(9, "delay degradation trend", &mut || delay_trend(&runs));
        }
        report(12, "determinism", &mut || cli_determinism(&f1));
    }

    if !all {
        std::process::exit(1);
    }
}
