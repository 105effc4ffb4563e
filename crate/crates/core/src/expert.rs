//! Centralized expert: minimum-total-distance assignment and straight-line subgoals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planner::Subgoal;
use crate::world::{self, Point};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `goal_of_robot[i]` is the goal index assigned to robot `i`.
    pub goal_of_robot: Vec<usize>,
    pub total_cost: f64,
}

/// Row-major square cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::Assignment(format!("cost matrix is not square: {n} rows, a row of {}", bad.len())));
        }
        let data: Vec<f64> = rows.concat();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Assignment("cost matrix has a non-finite entry".into()));
        }
        Ok(Self { n, data })
    }

    /// Euclidean distances from every robot to every goal.
    pub fn euclidean(robots: &[Point], goals: &[Point]) -> Result<Self> {
        if robots.len() != goals.len() {
            return Err(Error::Assignment(format!("{} robots for {} goals", robots.len(), goals.len())));
        }
        let rows: Vec<Vec<f64>> = robots
            .iter()
            .map(|r| goals.iter().map(|g| world::distance(r, g)).collect())
            .collect();
        Self::new(&rows)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n + col]
    }

    pub fn cost_of(&self, goal_of_robot: &[usize]) -> f64 {
        goal_of_robot.iter().enumerate().map(|(i, &j)| self.get(i, j)).sum()
    }
}

/// Minimum-cost perfect matching by the shortest augmenting path method with potentials, `O(n³)`.
pub fn hungarian(cost: &CostMatrix) -> Assignment {
    let n = cost.size();
    if n == 0 {
        return Assignment {
            goal_of_robot: Vec::new(),
            total_cost: 0.0,
        };
    }
    // 1-based columns; column 0 is the virtual source of each augmenting path.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        row_of_col[0] = row;
        let mut col0 = 0;
        let mut min_slack = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = row_of_col[col0];
            let mut delta = f64::INFINITY;
            let mut next = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let slack = cost.get(r - 1, col - 1) - u[r] - v[col];
                if slack < min_slack[col] {
                    min_slack[col] = slack;
                    way[col] = col0;
                }
                if min_slack[col] < delta {
                    delta = min_slack[col];
                    next = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[row_of_col[col]] += delta;
                    v[col] -= delta;
                } else {
                    min_slack[col] -= delta;
                }
            }
            col0 = next;
            if row_of_col[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            row_of_col[col0] = row_of_col[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut goal_of_robot = vec![0; n];
    for col in 1..=n {
        goal_of_robot[row_of_col[col] - 1] = col - 1;
    }
    let total_cost = cost.cost_of(&goal_of_robot);
    Assignment {
        goal_of_robot,
        total_cost,
    }
}

/// Straight-line step toward `goal`, at most `spatial_horizon` long.
pub fn expert_subgoal(position: &[f64], goal: &[f64], spatial_horizon: f64) -> Subgoal {
    let delta: Vec<f64> = goal.iter().zip(position).map(|(g, p)| g - p).collect();
    let dist = world::norm(&delta);
    if dist <= spatial_horizon {
        return Subgoal { displacement: delta };
    }
    let scale = spatial_horizon / dist;
    Subgoal {
        displacement: delta.iter().map(|d| d * scale).collect(),
    }
}

/// Expert subgoals for every robot. A `frozen` assignment is reused instead of solving a new one.
pub fn expert_policy(
    robots: &[Point],
    goals: &[Point],
    spatial_horizon: f64,
    frozen: Option<&Assignment>,
) -> Result<(Vec<Subgoal>, Assignment)> {
    let assignment = match frozen {
        Some(a) => {
            if a.goal_of_robot.len() != robots.len() {
                return Err(Error::Assignment(format!(
                    "frozen assignment covers {} robots, scene has {}",
                    a.goal_of_robot.len(),
                    robots.len()
                )));
            }
            let cost = CostMatrix::euclidean(robots, goals)?;
            Assignment {
                goal_of_robot: a.goal_of_robot.clone(),
                total_cost: cost.cost_of(&a.goal_of_robot),
            }
        }
        None => hungarian(&CostMatrix::euclidean(robots, goals)?),
    };
    let subgoals = robots
        .iter()
        .zip(&assignment.goal_of_robot)
        .map(|(p, &g)| expert_subgoal(p, &goals[g], spatial_horizon))
        .collect();
    Ok((subgoals, assignment))
}
