//! Receding-horizon tracking of subgoals on double-integrator robots with barrier-function
//! collision constraints.

pub mod qp;
pub mod reference;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use qp::{kkt_residuals, solve_qp, Constraints, KktResiduals, QpSolution, QpSolver, QpStatus};
pub use reference::{min_jerk_reference, MinJerk, ReferenceMode, ReferenceSample, ReferenceTrajectory};

use crate::error::{Error, Result};
use crate::world::{self, Point};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Prediction horizon, seconds.
    pub horizon: f64,
    /// Control period, seconds.
    pub dt: f64,
    /// Step of the prediction model. Controls are held constant over each prediction step.
    pub pred_dt: f64,
    pub q_pos: f64,
    pub q_vel: f64,
    pub r: f64,
    pub v_max: f64,
    /// Per-axis acceleration bound, m/s².
    pub u_max: f64,
    pub d_safe: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    /// Sensed neighbors that get a barrier row.
    pub max_neighbors: usize,
    /// Fraction of the barrier requirement each robot takes on. 1 assumes neighbors do not accelerate;
    /// 0.5 splits it between the two robots of a pair.
    pub cbf_share: f64,
    /// Adds linearized separation rows at every predicted step, neighbors extrapolated at constant velocity.
    pub cbf_all_steps: bool,
    pub reference: ReferenceMode,
    /// Lower bound on min-jerk segment duration, seconds.
    pub min_duration: f64,
    /// Facets of the polygon approximating the planar speed limit.
    pub speed_facets: usize,
    pub qp_tol: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            horizon: 1.5,
            dt: 0.01,
            pred_dt: 0.1,
            q_pos: 10.0,
            q_vel: 1.0,
            r: 0.1,
            v_max: 2.0,
            u_max: 4.0,
            d_safe: 0.5,
            gamma1: 2.0,
            gamma2: 2.0,
            max_neighbors: 3,
            cbf_share: 1.0,
            cbf_all_steps: false,
            reference: ReferenceMode::PhaseMatched,
            min_duration: 0.5,
            speed_facets: 8,
            qp_tol: 1e-6,
        }
    }
}

fn is_multiple(a: f64, b: f64) -> bool {
    let k = (a / b).round();
    k >= 1.0 && (a - k * b).abs() <= 1e-9 * a.max(1.0)
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("horizon", self.horizon),
            ("dt", self.dt),
            ("pred_dt", self.pred_dt),
            ("q_pos", self.q_pos),
            ("q_vel", self.q_vel),
            ("r", self.r),
            ("v_max", self.v_max),
            ("u_max", self.u_max),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("cbf_share", self.cbf_share),
            ("qp_tol", self.qp_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("controller {name} must be positive, got {v}")));
            }
        }
        if !(self.d_safe >= 0.0) || !(self.min_duration >= 0.0) {
            return Err(Error::Config("controller d_safe and min_duration must be non-negative".into()));
        }
        if !is_multiple(self.horizon, self.dt) || !is_multiple(self.horizon, self.pred_dt) {
            return Err(Error::Config(format!(
                "horizon {} must be a multiple of dt {} and pred_dt {}",
                self.horizon, self.dt, self.pred_dt
            )));
        }
        if self.speed_facets < 4 {
            return Err(Error::Config(format!("speed_facets must be at least 4, got {}", self.speed_facets)));
        }
        Ok(())
    }

    pub fn prediction_steps(&self) -> usize {
        (self.horizon / self.pred_dt).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub position: Point,
    pub velocity: Vec<f64>,
}

impl RobotState {
    pub fn at_rest(position: Point) -> Self {
        let dim = position.len();
        Self {
            position,
            velocity: vec![0.0; dim],
        }
    }

    pub fn speed(&self) -> f64 {
        world::norm(&self.velocity)
    }
}

/// Exact double-integrator step under constant acceleration.
pub fn integrate(state: &RobotState, accel: &[f64], dt: f64) -> RobotState {
    RobotState {
        position: state
            .position
            .iter()
            .zip(&state.velocity)
            .zip(accel)
            .map(|((p, v), u)| p + v * dt + 0.5 * u * dt * dt)
            .collect(),
        velocity: state.velocity.iter().zip(accel).map(|(v, u)| v + u * dt).collect(),
    }
}

/// One barrier row `coeffs · u ≥ bound` on the first control, or `None` for coincident robots.
#[derive(Debug, Clone, PartialEq)]
pub struct CbfRow {
    pub coeffs: Vec<f64>,
    pub bound: f64,
}

pub fn cbf_row(own: &RobotState, other: &RobotState, d_safe: f64, gamma1: f64, gamma2: f64) -> Option<CbfRow> {
    let dp: Vec<f64> = own.position.iter().zip(&other.position).map(|(a, b)| a - b).collect();
    let dv: Vec<f64> = own.velocity.iter().zip(&other.velocity).map(|(a, b)| a - b).collect();
    let dist2: f64 = dp.iter().map(|x| x * x).sum();
    if dist2 == 0.0 {
        return None;
    }
    let h = dist2 - d_safe * d_safe;
    let h_dot = 2.0 * dp.iter().zip(&dv).map(|(a, b)| a * b).sum::<f64>();
    let dv2: f64 = dv.iter().map(|x| x * x).sum();
    Some(CbfRow {
        coeffs: dp.iter().map(|x| 2.0 * x).collect(),
        bound: -2.0 * dv2 - (gamma1 + gamma2) * h_dot - gamma1 * gamma2 * h,
    })
}

/// Barrier rows for every neighbor. Coincident neighbors are skipped and reported by index.
pub fn cbf_rows(own: &RobotState, neighbors: &[RobotState], d_safe: f64, gamma1: f64, gamma2: f64) -> (Vec<CbfRow>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (j, other) in neighbors.iter().enumerate() {
        match cbf_row(own, other, d_safe, gamma1, gamma2) {
            Some(row) => rows.push(row),
            None => {
                log::warn!("safety violation: neighbor {j} coincides with robot, barrier row skipped");
                skipped.push(j);
            }
        }
    }
    (rows, skipped)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hessian: Vec<f64>,
    pub linear: Vec<f64>,
    pub constraints: Constraints,
    /// Neighbors (indices into the slice passed to `build_qp`) whose barrier row was skipped.
    pub skipped_neighbors: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub acceleration: Vec<f64>,
    pub status: QpStatus,
    /// True when the QP failed and the braking fallback was applied.
    pub braking: bool,
    pub kkt: Option<KktResiduals>,
    pub skipped_neighbors: usize,
}

/// Maximal braking along `−v`, never reversing the velocity within one period.
pub fn braking_acceleration(velocity: &[f64], u_max: f64, dt: f64) -> Vec<f64> {
    let speed = world::norm(velocity);
    if speed == 0.0 {
        return vec![0.0; velocity.len()];
    }
    let mag = u_max.min(speed / dt);
    velocity.iter().map(|v| -v / speed * mag).collect()
}

/// Condensed MPC for one dimension count. Immutable and shared by every robot using the same config.
#[derive(Debug, Clone)]
pub struct Controller {
    cfg: ControllerConfig,
    dim: usize,
    steps: usize,
    /// `p_k = p0 + k·h·v0 + Σ_j pos_map[k−1][j] u_j`, row-major `[H, H]`.
    pos_map: Vec<f64>,
    solver: QpSolver,
}

impl Controller {
    pub fn new(cfg: ControllerConfig, dim: usize) -> Result<Self> {
        cfg.validate()?;
        if dim != 2 && dim != 3 {
            return Err(Error::InvalidArgument(format!("controller dimension must be 2 or 3, got {dim}")));
        }
        let steps = cfg.prediction_steps();
        let h = cfg.pred_dt;
        let mut pos_map = vec![0.0; steps * steps];
        let mut vel_map = vec![0.0; steps * steps];
        for k in 1..=steps {
            for j in 0..k {
                pos_map[(k - 1) * steps + j] = h * h * (k as f64 - j as f64 - 0.5);
                vel_map[(k - 1) * steps + j] = h;
            }
        }
        let mut block = vec![0.0; steps * steps];
        for j in 0..steps {
            for l in 0..steps {
                let mut acc = if j == l { cfg.r } else { 0.0 };
                for k in 0..steps {
                    acc += cfg.q_pos * pos_map[k * steps + j] * pos_map[k * steps + l]
                        + cfg.q_vel * vel_map[k * steps + j] * vel_map[k * steps + l];
                }
                block[j * steps + l] = acc;
            }
        }
        let n = steps * dim;
        let mut hessian = vec![0.0; n * n];
        for j in 0..steps {
            for l in 0..steps {
                for d in 0..dim {
                    hessian[(j * dim + d) * n + l * dim + d] = block[j * steps + l];
                }
            }
        }
        let solver = QpSolver::new(&hessian, n)?;
        Ok(Self {
            cfg,
            dim,
            steps,
            pos_map,
            solver,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prediction_steps(&self) -> usize {
        self.steps
    }

    pub fn num_vars(&self) -> usize {
        self.steps * self.dim
    }

    /// Neighbors ordered by distance, truncated to `max_neighbors`.
    fn sensed<'a>(&self, state: &RobotState, neighbors: &'a [RobotState]) -> Vec<(usize, &'a RobotState)> {
        let mut order: Vec<(f64, usize)> = neighbors
            .iter()
            .enumerate()
            .map(|(j, s)| (world::distance(&state.position, &s.position), j))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        order.truncate(self.cfg.max_neighbors);
        order.into_iter().map(|(_, j)| (j, &neighbors[j])).collect()
    }

    /// `reference[k]` is the target at `k + 1` prediction steps ahead.
    pub fn build_qp(&self, state: &RobotState, reference: &[ReferenceSample], neighbors: &[RobotState]) -> Result<QpProblem> {
        let (dim, steps, h) = (self.dim, self.steps, self.cfg.pred_dt);
        if reference.len() != steps {
            return Err(Error::ShapeMismatch {
                op: "mpc reference",
                left: vec![reference.len()],
                right: vec![steps],
            });
        }
        if state.position.len() != dim || state.velocity.len() != dim {
            return Err(Error::InvalidArgument(format!("robot state must have dimension {dim}")));
        }
        let n = steps * dim;
        let mut linear = vec![0.0; n];
        for (k, r) in reference.iter().enumerate() {
            let t = (k + 1) as f64 * h;
            for d in 0..dim {
                let pos_err = state.position[d] + t * state.velocity[d] - r.position[d];
                let vel_err = state.velocity[d] - r.velocity[d];
                for j in 0..=k {
                    linear[j * dim + d] += self.cfg.q_pos * self.pos_map[k * steps + j] * pos_err + self.cfg.q_vel * h * vel_err;
                }
            }
        }

        let mut cons = Constraints::new(n);
        cons.push_box(-self.cfg.u_max, self.cfg.u_max);
        self.push_speed_rows(&mut cons, &state.velocity);

        let sensed = self.sensed(state, neighbors);
        let mut skipped = Vec::new();
        let mut row = vec![0.0; n];
        for &(j, other) in &sensed {
            match cbf_row(state, other, self.cfg.d_safe, self.cfg.gamma1, self.cfg.gamma2) {
                Some(cbf) => {
                    row.fill(0.0);
                    row[..dim].copy_from_slice(&cbf.coeffs);
                    cons.push(&row, self.cfg.cbf_share * cbf.bound);
                }
                None => {
                    log::warn!("safety violation: neighbor {j} coincides with robot, barrier row skipped");
                    skipped.push(j);
                }
            }
        }
        if self.cfg.cbf_all_steps {
            for &(_, other) in &sensed {
                for k in 1..=steps {
                    let t = k as f64 * h;
                    let nominal: Vec<f64> = (0..dim)
                        .map(|d| state.position[d] + t * state.velocity[d] - other.position[d] - t * other.velocity[d])
                        .collect();
                    let dist = world::norm(&nominal);
                    if dist == 0.0 {
                        continue;
                    }
                    row.fill(0.0);
                    for j in 0..k {
                        for d in 0..dim {
                            row[j * dim + d] = nominal[d] / dist * self.pos_map[(k - 1) * steps + j];
                        }
                    }
                    cons.push(&row, self.cfg.d_safe - dist);
                }
            }
        }
        Ok(QpProblem {
            hessian: self.solver.hessian().to_vec(),
            linear,
            constraints: cons,
            skipped_neighbors: skipped,
        })
    }

    /// `n · v_k ≤ v_max` for facet normals in the plane; the third axis, if any, gets a plain bound.
    fn push_speed_rows(&self, cons: &mut Constraints, v0: &[f64]) {
        let (dim, steps, h) = (self.dim, self.steps, self.cfg.pred_dt);
        let mut normals: Vec<Vec<f64>> = (0..self.cfg.speed_facets)
            .map(|m| {
                let theta = 2.0 * std::f64::consts::PI * m as f64 / self.cfg.speed_facets as f64;
                let mut n = vec![0.0; dim];
                n[0] = theta.cos();
                n[1] = theta.sin();
                n
            })
            .collect();
        if dim == 3 {
            normals.push(vec![0.0, 0.0, 1.0]);
            normals.push(vec![0.0, 0.0, -1.0]);
        }
        let mut row = vec![0.0; steps * dim];
        for k in 1..=steps {
            for normal in &normals {
                row.fill(0.0);
                for j in 0..k {
                    for d in 0..dim {
                        row[j * dim + d] = -normal[d] * h;
                    }
                }
                let nv: f64 = normal.iter().zip(v0).map(|(a, b)| a * b).sum();
                cons.push(&row, nv - self.cfg.v_max);
            }
        }
    }

    pub fn solve(&self, problem: &QpProblem) -> Result<QpSolution> {
        self.solver.solve(&problem.linear, &problem.constraints)
    }

    /// Solves and returns the first control, braking if the QP has no usable solution.
    pub fn step(&self, state: &RobotState, reference: &[ReferenceSample], neighbors: &[RobotState]) -> Result<StepOutcome> {
        let problem = self.build_qp(state, reference, neighbors)?;
        let sol = self.solve(&problem)?;
        let kkt = kkt_residuals(&problem.hessian, &problem.linear, &problem.constraints, &sol.x, &sol.duals);
        if sol.status == QpStatus::Optimal {
            if kkt.max() > self.cfg.qp_tol {
                log::warn!("qp kkt residual {:e} above tolerance {:e}", kkt.max(), self.cfg.qp_tol);
            }
            Ok(StepOutcome {
                acceleration: sol.x[..self.dim].to_vec(),
                status: sol.status,
                braking: false,
                kkt: Some(kkt),
                skipped_neighbors: problem.skipped_neighbors.len(),
            })
        } else {
            log::debug!("qp {}: braking", sol.status.name());
            Ok(StepOutcome {
                acceleration: braking_acceleration(&state.velocity, self.cfg.u_max, self.cfg.dt),
                status: sol.status,
                braking: true,
                kkt: None,
                skipped_neighbors: problem.skipped_neighbors.len(),
            })
        }
    }

    /// Controller step tracking `tracker` at time `now`.
    pub fn track(&self, state: &RobotState, tracker: &Tracker, now: f64, neighbors: &[RobotState]) -> Result<StepOutcome> {
        let reference = tracker.horizon(now, self.steps, self.cfg.pred_dt);
        self.step(state, &reference, neighbors)
    }
}

/// The min-jerk segment a robot currently follows.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracker {
    pub segment: MinJerk,
    pub activated_at: f64,
}

impl Tracker {
    pub fn idle(position: &[f64]) -> Self {
        Self {
            segment: MinJerk::stationary(position),
            activated_at: 0.0,
        }
    }

    pub fn toward(cfg: &ControllerConfig, state: &RobotState, target: &[f64], now: f64) -> Self {
        Self {
            segment: MinJerk::new(cfg.reference, &state.position, &state.velocity, target, cfg.v_max, cfg.min_duration),
            activated_at: now,
        }
    }

    pub fn target(&self) -> Point {
        self.segment.target()
    }

    /// Samples at `now + k·h`, `k = 1..=steps`.
    pub fn horizon(&self, now: f64, steps: usize, h: f64) -> Vec<ReferenceSample> {
        let elapsed = now - self.activated_at;
        (1..=steps).map(|k| self.segment.sample(elapsed + k as f64 * h)).collect()
    }
}

/// Single-robot step toward `state.position + subgoal` along a fresh rest-to-rest reference.
pub fn mpc_step(state: &RobotState, subgoal: &[f64], neighbors: &[RobotState], cfg: &ControllerConfig) -> Result<(StepOutcome, RobotState)> {
    let controller = Controller::new(cfg.clone(), state.position.len())?;
    let target: Point = state.position.iter().zip(subgoal).map(|(p, d)| p + d).collect();
    let tracker = Tracker {
        segment: MinJerk::rest_to_rest(&state.position, &target, cfg.v_max, cfg.min_duration),
        activated_at: 0.0,
    };
    let outcome = controller.track(state, &tracker, 0.0, neighbors)?;
    let next = integrate(state, &outcome.acceleration, cfg.dt);
    Ok((outcome, next))
}

pub fn min_pairwise_distance(positions: &[Point]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..positions.len() {
        for j in i + 1..positions.len() {
            best = best.min(world::distance(&positions[i], &positions[j]));
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub t: f64,
    pub robot: usize,
    pub state: RobotState,
    pub accel: Vec<f64>,
    pub status: QpStatus,
    pub min_neighbor_dist: f64,
}

/// Per-tick log of a closed-loop run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryLog {
    pub rows: Vec<TrajectoryRow>,
    pub min_distance: f64,
    pub qp_failures: usize,
    pub solves: usize,
    pub max_kkt: f64,
}

impl TrajectoryLog {
    pub fn new() -> Self {
        Self {
            min_distance: f64::INFINITY,
            ..Default::default()
        }
    }

    /// Records the states at time `t` together with the controls computed from them.
    pub fn record(&mut self, t: f64, states: &[RobotState], outcomes: &[StepOutcome]) {
        for (i, (s, o)) in states.iter().zip(outcomes).enumerate() {
            let nearest = states
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, other)| world::distance(&s.position, &other.position))
                .fold(f64::INFINITY, f64::min);
            self.min_distance = self.min_distance.min(nearest);
            self.solves += 1;
            if o.status != QpStatus::Optimal {
                self.qp_failures += 1;
            }
            if let Some(k) = &o.kkt {
                self.max_kkt = self.max_kkt.max(k.max());
            }
            self.rows.push(TrajectoryRow {
                t,
                robot: i,
                state: s.clone(),
                accel: o.acceleration.clone(),
                status: o.status,
                min_neighbor_dist: nearest,
            });
        }
    }

    /// Accounts for final states that have no control attached.
    pub fn record_final(&mut self, states: &[RobotState]) {
        let positions: Vec<Point> = states.iter().map(|s| s.position.clone()).collect();
        self.min_distance = self.min_distance.min(min_pairwise_distance(&positions));
    }

    pub fn all_feasible(&self) -> bool {
        self.qp_failures == 0
    }

    /// `(t, positions)` per tick, for coverage scans.
    pub fn positions_by_time(&self) -> Vec<(f64, Vec<Point>)> {
        let mut out: Vec<(f64, Vec<Point>)> = Vec::new();
        for row in &self.rows {
            match out.last_mut() {
                Some((t, ps)) if *t == row.t => ps.push(row.state.position.clone()),
                _ => out.push((row.t, vec![row.state.position.clone()])),
            }
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::from("t,robot,px,py,vx,vy,ux,uy,qp_status,min_neighbor_dist\n");
        for r in &self.rows {
            if r.state.position.len() != 2 {
                return Err(Error::InvalidArgument("trajectory csv supports planar runs only".into()));
            }
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.t,
                r.robot,
                r.state.position[0],
                r.state.position[1],
                r.state.velocity[0],
                r.state.velocity[1],
                r.accel[0],
                r.accel[1],
                r.status.name(),
                r.min_neighbor_dist
            );
        }
        Ok(out)
    }
}

/// Lockstep simulation where every robot tracks one fixed target.
pub fn simulate_targets(starts: &[Point], targets: &[Point], cfg: &ControllerConfig, duration: f64) -> Result<(Vec<RobotState>, TrajectoryLog)> {
    if starts.len() != targets.len() || starts.is_empty() {
        return Err(Error::InvalidArgument("need one target per robot".into()));
    }
    let controller = Controller::new(cfg.clone(), starts[0].len())?;
    let mut states: Vec<RobotState> = starts.iter().map(|p| RobotState::at_rest(p.clone())).collect();
    let trackers: Vec<Tracker> = states.iter().zip(targets).map(|(s, t)| Tracker::toward(cfg, s, t, 0.0)).collect();
    let ticks = (duration / cfg.dt).round() as usize;
    let mut log = TrajectoryLog::new();
    let mut others: Vec<RobotState> = Vec::with_capacity(states.len());
    for tick in 0..ticks {
        let now = tick as f64 * cfg.dt;
        let mut outcomes = Vec::with_capacity(states.len());
        for i in 0..states.len() {
            others.clear();
            others.extend(states.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, s)| s.clone()));
            outcomes.push(controller.track(&states[i], &trackers[i], now, &others)?);
        }
        log.record(now, &states, &outcomes);
        states = states.iter().zip(&outcomes).map(|(s, o)| integrate(s, &o.acceleration, cfg.dt)).collect();
    }
    log.record_final(&states);
    Ok((states, log))
}
