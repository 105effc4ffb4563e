//! Scenarios, local sensing, communication graphs and coverage metrics.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the plane or in space. Length equals the scenario dimension.
pub type Point = Vec<f64>;

/// Minimum pairwise separation used when sampling random positions.
pub const DEFAULT_MIN_SEPARATION: f64 = 1.0;

/// Coverage threshold used by every evaluation in this crate.
pub const DEFAULT_COVERAGE_THRESHOLD: f64 = 0.2;

const MAX_SAMPLING_RETRIES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub robots: Vec<Point>,
    pub goals: Vec<Point>,
    /// Side length of the square (cubic) environment, meters.
    pub env_size: f64,
    pub dim: usize,
    pub seed: u64,
}

impl Scenario {
    pub fn new(robots: Vec<Point>, goals: Vec<Point>, env_size: f64, dim: usize, seed: u64) -> Result<Self> {
        let scenario = Self {
            robots,
            goals,
            env_size,
            dim,
            seed,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn num_robots(&self) -> usize {
        self.robots.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 2 && self.dim != 3 {
            return Err(Error::InvalidScenario(format!("dimension must be 2 or 3, got {}", self.dim)));
        }
        if !(self.env_size > 0.0) {
            return Err(Error::InvalidScenario(format!("environment size must be positive, got {}", self.env_size)));
        }
        if self.robots.is_empty() {
            return Err(Error::InvalidScenario("at least one robot is required".into()));
        }
        if self.robots.len() != self.goals.len() {
            return Err(Error::InvalidScenario(format!(
                "{} robots but {} goals",
                self.robots.len(),
                self.goals.len()
            )));
        }
        for p in self.robots.iter().chain(&self.goals) {
            if p.len() != self.dim {
                return Err(Error::InvalidScenario(format!("point {p:?} does not have dimension {}", self.dim)));
            }
            if p.iter().any(|&c| !c.is_finite() || c < 0.0 || c > self.env_size) {
                return Err(Error::InvalidScenario(format!(
                    "point {p:?} outside [0, {}]",
                    self.env_size
                )));
            }
        }
        Ok(())
    }

    /// Same goals, new robot positions.
    pub fn with_robots(&self, robots: Vec<Point>) -> Self {
        Self {
            robots,
            ..self.clone()
        }
    }

    /// Plain-text form: `N n D_w seed` header, one row per robot, a blank line, one row per goal.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {} {} {}", self.robots.len(), self.dim, fmt_sig9(self.env_size), self.seed);
        for p in &self.robots {
            out.push_str(&fmt_row(p));
        }
        out.push('\n');
        for p in &self.goals {
            out.push_str(&fmt_row(p));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let scenario = parse_scenario(&mut lines)?;
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(Error::Parse("trailing content after scenario".into()));
        }
        Ok(scenario)
    }
}

/// Formats a value with nine significant digits in a form that re-parses exactly to itself.
pub fn fmt_sig9(v: f64) -> String {
    format!("{v:.8e}")
}

fn fmt_row(p: &[f64]) -> String {
    let mut s = p.iter().map(|&c| fmt_sig9(c)).collect::<Vec<_>>().join(" ");
    s.push('\n');
    s
}

fn parse_row(line: &str, dim: usize) -> Result<Point> {
    let values = line
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("bad number {t:?}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if values.len() != dim {
        return Err(Error::Parse(format!("expected {dim} coordinates, found {:?}", line)));
    }
    Ok(values)
}

fn next_nonblank<'a>(lines: &mut impl Iterator<Item = &'a str>) -> Option<&'a str> {
    lines.find(|l| !l.trim().is_empty())
}

/// Parses one scenario record from a line stream; used by the dataset reader as well.
pub(crate) fn parse_scenario<'a>(lines: &mut impl Iterator<Item = &'a str>) -> Result<Scenario> {
    let header = next_nonblank(lines).ok_or_else(|| Error::Parse("missing scenario header".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 {
        return Err(Error::Parse(format!("scenario header needs `N n D_w seed`, got {header:?}")));
    }
    let parse_err = |what: &str| Error::Parse(format!("bad {what} in header {header:?}"));
    let n: usize = fields[0].parse().map_err(|_| parse_err("N"))?;
    let dim: usize = fields[1].parse().map_err(|_| parse_err("dimension"))?;
    let env_size: f64 = fields[2].parse().map_err(|_| parse_err("D_w"))?;
    let seed: u64 = fields[3].parse().map_err(|_| parse_err("seed"))?;
    let mut read_block = |what: &str| -> Result<Vec<Point>> {
        (0..n)
            .map(|_| {
                let line = next_nonblank(lines).ok_or_else(|| Error::Parse(format!("truncated {what} block")))?;
                parse_row(line, dim)
            })
            .collect()
    };
    let robots = read_block("robot")?;
    let goals = read_block("goal")?;
    Scenario::new(robots, goals, env_size, dim, seed)
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Indices of `points` other than `exclude`, sorted by distance to `origin`, ties to the lower index.
fn sorted_by_distance(origin: &[f64], points: &[Point], exclude: Option<usize>) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != exclude)
        .map(|(j, p)| (distance(origin, p), j))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().map(|(_, j)| j).collect()
}

/// Directed communication graph: `neighbors[i]` lists the robots `i` listens to, nearest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjacencyGraph {
    pub neighbors: Vec<Vec<usize>>,
}

impl AdjacencyGraph {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// Robots that list `i` as a neighbor, in increasing index order.
    pub fn audience(&self, i: usize) -> Vec<usize> {
        (0..self.neighbors.len()).filter(|&r| self.neighbors[r].contains(&i)).collect()
    }

    /// Number of neighbors per robot; identical for every robot of a graph.
    pub fn degree(&self) -> usize {
        self.neighbors.first().map_or(0, Vec::len)
    }

    /// Whether `A[i][j] = 1`.
    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].contains(&j)
    }
}

pub fn build_adjacency(positions: &[Point], max_neighbors: usize) -> AdjacencyGraph {
    let neighbors = positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut order = sorted_by_distance(p, positions, Some(i));
            order.truncate(max_neighbors);
            order
        })
        .collect();
    AdjacencyGraph { neighbors }
}

/// What a robot senses: its own position plus the nearest goals and robots as relative vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub position: Point,
    pub goal_offsets: Vec<Point>,
    pub goal_mask: Vec<bool>,
    pub robot_offsets: Vec<Point>,
    pub robot_mask: Vec<bool>,
}

fn offsets_to(origin: &[f64], points: &[Point], order: &[usize], slots: usize, dim: usize) -> (Vec<Point>, Vec<bool>) {
    let mut offsets = Vec::with_capacity(slots);
    let mut mask = Vec::with_capacity(slots);
    for k in 0..slots {
        match order.get(k) {
            Some(&j) => {
                offsets.push(points[j].iter().zip(origin).map(|(a, b)| a - b).collect());
                mask.push(true);
            }
            None => {
                offsets.push(vec![0.0; dim]);
                mask.push(false);
            }
        }
    }
    (offsets, mask)
}

/// Observation of robot `robot` given arbitrary robot positions and goals.
pub fn sense_positions(robots: &[Point], goals: &[Point], robot: usize, goal_slots: usize, robot_slots: usize) -> Observation {
    let origin = &robots[robot];
    let dim = origin.len();
    let goal_order = sorted_by_distance(origin, goals, None);
    let robot_order = sorted_by_distance(origin, robots, Some(robot));
    let (goal_offsets, goal_mask) = offsets_to(origin, goals, &goal_order, goal_slots, dim);
    let (robot_offsets, robot_mask) = offsets_to(origin, robots, &robot_order, robot_slots, dim);
    Observation {
        position: origin.clone(),
        goal_offsets,
        goal_mask,
        robot_offsets,
        robot_mask,
    }
}

pub fn sense(scenario: &Scenario, robot: usize, goal_slots: usize, robot_slots: usize) -> Result<Observation> {
    if robot >= scenario.num_robots() {
        return Err(Error::IndexOutOfRange {
            index: robot,
            len: scenario.num_robots(),
        });
    }
    Ok(sense_positions(&scenario.robots, &scenario.goals, robot, goal_slots, robot_slots))
}

/// Observation scaled to unit range, flattened as `[p; g_1..g_Pg; r_1..r_Pr]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedObservation {
    pub features: Vec<f64>,
}

pub fn normalize(obs: &Observation, env_size: f64) -> Result<NormalizedObservation> {
    if !(env_size > 0.0) {
        return Err(Error::InvalidArgument(format!("environment size must be positive, got {env_size}")));
    }
    let offset_scale = 2.0 * env_size;
    let mut features = Vec::with_capacity(obs.position.len() * (1 + obs.goal_offsets.len() + obs.robot_offsets.len()));
    features.extend(obs.position.iter().map(|c| c / env_size));
    for off in obs.goal_offsets.iter().chain(&obs.robot_offsets) {
        features.extend(off.iter().map(|c| c / offset_scale));
    }
    Ok(NormalizedObservation { features })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub covered: Vec<bool>,
    pub fraction: f64,
    /// First time every goal was simultaneously covered, if ever.
    pub coverage_time: Option<f64>,
}

pub fn covered_goals(robots: &[Point], goals: &[Point], threshold: f64) -> Vec<bool> {
    goals
        .iter()
        .map(|g| robots.iter().map(|p| distance(g, p)).fold(f64::INFINITY, f64::min) < threshold)
        .collect()
}

/// Coverage of `goals` by robots at one instant.
pub fn coverage(robots: &[Point], goals: &[Point], threshold: f64) -> Result<CoverageReport> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!("coverage threshold must be positive, got {threshold}")));
    }
    let covered = covered_goals(robots, goals, threshold);
    let fraction = covered.iter().filter(|&&c| c).count() as f64 / covered.len().max(1) as f64;
    let coverage_time = covered.iter().all(|&c| c).then_some(0.0);
    Ok(CoverageReport {
        covered,
        fraction,
        coverage_time,
    })
}

/// Coverage over a logged trajectory `(time, positions)`. Flags and fraction refer to the last
/// sample; the coverage time is the first sample at which all goals are covered.
pub fn coverage_over_log(log: &[(f64, Vec<Point>)], goals: &[Point], threshold: f64) -> Result<CoverageReport> {
    let (_, last) = log
        .last()
        .ok_or_else(|| Error::InvalidArgument("empty trajectory log".into()))?;
    let mut report = coverage(last, goals, threshold)?;
    report.coverage_time = log
        .iter()
        .find(|(_, pos)| covered_goals(pos, goals, threshold).iter().all(|&c| c))
        .map(|(t, _)| *t);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioKind {
    Random,
    /// Goals equally spaced on a circle in the first two coordinates.
    Circle { center: Point, radius: f64 },
    /// Goals on a near-uniform grid over an axis-aligned box.
    Zone { min: Point, max: Point },
}

fn sample_separated(rng: &mut ChaCha8Rng, count: usize, dim: usize, env_size: f64, min_sep: f64) -> Result<Vec<Point>> {
    let mut points: Vec<Point> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut accepted = None;
        for _ in 0..MAX_SAMPLING_RETRIES {
            let candidate: Point = (0..dim).map(|_| rng.gen_range(0.0..=env_size)).collect();
            if points.iter().all(|p| distance(p, &candidate) >= min_sep) {
                accepted = Some(candidate);
                break;
            }
        }
        points.push(accepted.ok_or_else(|| {
            Error::InvalidScenario(format!(
                "could not place {count} points {min_sep} m apart in a {env_size} m environment"
            ))
        })?);
    }
    Ok(points)
}

pub fn circle_goals(count: usize, center: &[f64], radius: f64) -> Vec<Point> {
    (0..count)
        .map(|j| {
            let theta = 2.0 * std::f64::consts::PI * j as f64 / count as f64;
            let mut p = center.to_vec();
            p[0] += radius * theta.cos();
            p[1] += radius * theta.sin();
            p
        })
        .collect()
}

/// Row-major fill of a `ceil(sqrt(N))` square grid of cell centers, surplus cells dropped.
pub fn zone_goals(count: usize, min: &[f64], max: &[f64]) -> Vec<Point> {
    let side = (count as f64).sqrt().ceil() as usize;
    let side = side.max(1);
    let mut goals = Vec::with_capacity(count);
    'outer: for row in 0..side {
        for col in 0..side {
            if goals.len() == count {
                break 'outer;
            }
            let mut p: Point = min.iter().zip(max).map(|(a, b)| 0.5 * (a + b)).collect();
            p[0] = min[0] + (max[0] - min[0]) * (col as f64 + 0.5) / side as f64;
            p[1] = min[1] + (max[1] - min[1]) * (row as f64 + 0.5) / side as f64;
            goals.push(p);
        }
    }
    goals
}

/// Builds a scenario. Robot starts are always sampled uniformly with rejection; goals depend on `kind`.
pub fn make_scenario(kind: &ScenarioKind, count: usize, env_size: f64, dim: usize, seed: u64) -> Result<Scenario> {
    make_scenario_with_separation(kind, count, env_size, dim, seed, DEFAULT_MIN_SEPARATION)
}

pub fn make_scenario_with_separation(
    kind: &ScenarioKind,
    count: usize,
    env_size: f64,
    dim: usize,
    seed: u64,
    min_sep: f64,
) -> Result<Scenario> {
    if count == 0 {
        return Err(Error::InvalidScenario("at least one robot is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let robots = sample_separated(&mut rng, count, dim, env_size, min_sep)?;
    let goals = match kind {
        ScenarioKind::Random => sample_separated(&mut rng, count, dim, env_size, min_sep)?,
        ScenarioKind::Circle { center, radius } => {
            check_dim(center, dim)?;
            circle_goals(count, center, *radius)
        }
        ScenarioKind::Zone { min, max } => {
            check_dim(min, dim)?;
            check_dim(max, dim)?;
            zone_goals(count, min, max)
        }
    };
    Scenario::new(robots, goals, env_size, dim, seed)
}

fn check_dim(p: &[f64], dim: usize) -> Result<()> {
    if p.len() != dim {
        return Err(Error::InvalidScenario(format!("parameter {p:?} does not have dimension {dim}")));
    }
    Ok(())
}
