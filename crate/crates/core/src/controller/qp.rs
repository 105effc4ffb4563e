//! Dense strictly convex QP solver, dual active-set method of Goldfarb and Idnani.
//!
//! Solves `min ½ xᵀGx + aᵀx` subject to `Cx ≥ b`. The Hessian is factored once per
//! [`QpSolver`], so problems that share it (every MPC step of a robot) only pay for the
//! active-set iterations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    IterationLimit,
}

impl QpStatus {
    pub fn name(self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::Infeasible => "infeasible",
            QpStatus::IterationLimit => "iteration_limit",
        }
    }
}

/// Inequality rows `C x ≥ b`, `C` row-major `[m, n]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Constraints {
    pub n: usize,
    pub rows: Vec<f64>,
    pub bounds: Vec<f64>,
}

impl Constraints {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            rows: Vec::new(),
            bounds: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.bounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bounds.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.n..(i + 1) * self.n]
    }

    pub fn push(&mut self, row: &[f64], bound: f64) {
        assert_eq!(row.len(), self.n, "constraint row width");
        self.rows.extend_from_slice(row);
        self.bounds.push(bound);
    }

    /// `coef · x[index] ≥ bound`.
    pub fn push_single(&mut self, index: usize, coef: f64, bound: f64) {
        let start = self.rows.len();
        self.rows.resize(start + self.n, 0.0);
        self.rows[start + index] = coef;
        self.bounds.push(bound);
    }

    /// `lo ≤ x[i] ≤ hi` for every variable.
    pub fn push_box(&mut self, lo: f64, hi: f64) {
        for i in 0..self.n {
            self.push_single(i, 1.0, lo);
            self.push_single(i, -1.0, -hi);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    /// `‖Gx + a − Cᵀλ‖∞`.
    pub stationarity: f64,
    /// `max(0, max_i (b_i − c_i·x))`.
    pub primal: f64,
    /// `max(0, max_i −λ_i)`.
    pub dual: f64,
    /// `max_i |λ_i (c_i·x − b_i)|`.
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub status: QpStatus,
    pub x: Vec<f64>,
    /// One multiplier per constraint row; zero for inactive rows.
    pub duals: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub active: Vec<usize>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Givens pair `(c, s, h)` with `[c s; −s c]·[a; b] = [h; 0]`.
fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    let h = a.hypot(b);
    if h == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (a / h, b / h, h)
    }
}

/// Objective value `½ xᵀGx + aᵀx` for a row-major `G`.
pub fn objective(hessian: &[f64], linear: &[f64], x: &[f64]) -> f64 {
    let n = x.len();
    let mut quad = 0.0;
    for i in 0..n {
        quad += x[i] * dot(&hessian[i * n..(i + 1) * n], x);
    }
    0.5 * quad + dot(linear, x)
}

pub fn kkt_residuals(hessian: &[f64], linear: &[f64], cons: &Constraints, x: &[f64], duals: &[f64]) -> KktResiduals {
    let n = x.len();
    let mut grad: Vec<f64> = (0..n).map(|i| dot(&hessian[i * n..(i + 1) * n], x) + linear[i]).collect();
    let mut primal = 0.0f64;
    let mut dual = 0.0f64;
    let mut comp = 0.0f64;
    for i in 0..cons.len() {
        let row = cons.row(i);
        for (g, c) in grad.iter_mut().zip(row) {
            *g -= duals[i] * c;
        }
        let slack = dot(row, x) - cons.bounds[i];
        primal = primal.max(-slack);
        dual = dual.max(-duals[i]);
        comp = comp.max((duals[i] * slack).abs());
    }
    KktResiduals {
        stationarity: grad.iter().fold(0.0f64, |m, g| m.max(g.abs())),
        primal,
        dual,
        complementarity: comp,
    }
}

/// A factored Hessian, reusable across linear terms and constraint sets.
#[derive(Debug, Clone)]
pub struct QpSolver {
    n: usize,
    hessian: Vec<f64>,
    /// Lower Cholesky factor, row-major.
    chol: Vec<f64>,
    /// `L⁻ᵀ`, row-major.
    j0: Vec<f64>,
    pub max_iterations: usize,
}

impl QpSolver {
    /// Factors a symmetric positive-definite row-major `[n, n]` Hessian.
    pub fn new(hessian: &[f64], n: usize) -> Result<Self> {
        if hessian.len() != n * n {
            return Err(Error::ShapeMismatch {
                op: "qp hessian",
                left: vec![hessian.len()],
                right: vec![n * n],
            });
        }
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = hessian[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if !(s > 0.0) {
                        return Err(Error::Solver(format!("hessian is not positive definite (pivot {i}: {s})")));
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        // Columns of L⁻¹ by forward substitution, stored transposed to give L⁻ᵀ.
        let mut j0 = vec![0.0; n * n];
        for col in 0..n {
            let mut y = vec![0.0; n];
            for i in col..n {
                let mut s = if i == col { 1.0 } else { 0.0 };
                for k in col..i {
                    s -= l[i * n + k] * y[k];
                }
                y[i] = s / l[i * n + i];
            }
            // y = L⁻¹ e_col, so (L⁻ᵀ)[col][i] = y[i].
            for i in 0..n {
                j0[col * n + i] = y[i];
            }
        }
        Ok(Self {
            n,
            hessian: hessian.to_vec(),
            chol: l,
            j0,
            max_iterations: 50 * (n + 10),
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn hessian(&self) -> &[f64] {
        &self.hessian
    }

    /// `G⁻¹ v` through the Cholesky factor.
    fn solve_hessian(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n;
        let l = &self.chol;
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = v[i];
            for k in 0..i {
                s -= l[i * n + k] * y[k];
            }
            y[i] = s / l[i * n + i];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l[k * n + i] * x[k];
            }
            x[i] = s / l[i * n + i];
        }
        x
    }

    pub fn solve(&self, linear: &[f64], cons: &Constraints) -> Result<QpSolution> {
        let n = self.n;
        if linear.len() != n || cons.n != n {
            return Err(Error::ShapeMismatch {
                op: "qp problem",
                left: vec![linear.len(), cons.n],
                right: vec![n, n],
            });
        }
        if linear.iter().chain(&cons.rows).chain(&cons.bounds).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("qp data".into()));
        }
        let m = cons.len();
        let neg: Vec<f64> = linear.iter().map(|v| -v).collect();
        let mut x = self.solve_hessian(&neg);
        // J is row-major; column j is J[.., j].
        let mut jm = self.j0.clone();
        // R is upper triangular, row-major [n, n]; only the leading q×q block is meaningful.
        let mut r = vec![0.0; n * n];
        let mut active: Vec<usize> = Vec::new();
        let mut u: Vec<f64> = Vec::new();
        let mut in_active = vec![false; m];
        let norms: Vec<f64> = (0..m).map(|i| dot(cons.row(i), cons.row(i)).sqrt().max(1e-300)).collect();
        let mut iterations = 0;
        let finish = |status: QpStatus, x: Vec<f64>, active: &[usize], u: &[f64], iterations: usize| {
            let mut duals = vec![0.0; m];
            for (&c, &v) in active.iter().zip(u) {
                duals[c] = v;
            }
            QpSolution {
                status,
                objective: objective(&self.hessian, linear, &x),
                x,
                duals,
                iterations,
                active: active.to_vec(),
            }
        };

        loop {
            // Most violated constraint, scaled by its row norm.
            let mut p = None;
            let mut worst = 0.0;
            for i in 0..m {
                if in_active[i] {
                    continue;
                }
                let s = (dot(cons.row(i), &x) - cons.bounds[i]) / norms[i];
                let tol = 1e-12 * (1.0 + cons.bounds[i].abs() / norms[i]);
                if s < -tol && s < worst {
                    worst = s;
                    p = Some(i);
                }
            }
            let Some(p) = p else {
                return Ok(finish(QpStatus::Optimal, x, &active, &u, iterations));
            };
            let np = cons.row(p);
            let mut u_p = 0.0;
            loop {
                iterations += 1;
                if iterations > self.max_iterations {
                    return Ok(finish(QpStatus::IterationLimit, x, &active, &u, iterations));
                }
                let q = active.len();
                let d: Vec<f64> = (0..n).map(|j| (0..n).map(|k| jm[k * n + j] * np[k]).sum()).collect();
                let mut z = vec![0.0; n];
                for j in q..n {
                    for k in 0..n {
                        z[k] += jm[k * n + j] * d[j];
                    }
                }
                let mut rv = vec![0.0; q];
                for i in (0..q).rev() {
                    let mut s = d[i];
                    for k in i + 1..q {
                        s -= r[i * n + k] * rv[k];
                    }
                    rv[i] = s / r[i * n + i];
                }
                let mut t1 = f64::INFINITY;
                let mut drop_at = None;
                for j in 0..q {
                    if rv[j] > 1e-14 {
                        let ratio = u[j] / rv[j];
                        if ratio < t1 {
                            t1 = ratio;
                            drop_at = Some(j);
                        }
                    }
                }
                let zn = dot(&z, np);
                let z_norm = dot(&z, &z).sqrt();
                let t2 = if z_norm <= 1e-14 * (1.0 + norms[p]) || zn <= 0.0 {
                    f64::INFINITY
                } else {
                    -(dot(np, &x) - cons.bounds[p]) / zn
                };
                let t = t1.min(t2);
                if !t.is_finite() {
                    return Ok(finish(QpStatus::Infeasible, x, &active, &u, iterations));
                }
                for (uj, rj) in u.iter_mut().zip(&rv) {
                    *uj -= t * rj;
                }
                u_p += t;
                if t2.is_finite() {
                    for (xk, zk) in x.iter_mut().zip(&z) {
                        *xk += t * zk;
                    }
                }
                if t2 <= t1 {
                    // Full step: p joins the active set.
                    let mut d = d;
                    for j in (q + 1..n).rev() {
                        let (c, s, h) = givens(d[j - 1], d[j]);
                        if s == 0.0 {
                            continue;
                        }
                        d[j - 1] = h;
                        d[j] = 0.0;
                        for k in 0..n {
                            let (a, b) = (jm[k * n + j - 1], jm[k * n + j]);
                            jm[k * n + j - 1] = c * a + s * b;
                            jm[k * n + j] = -s * a + c * b;
                        }
                    }
                    for i in 0..=q {
                        r[i * n + q] = d[i];
                    }
                    active.push(p);
                    u.push(u_p);
                    in_active[p] = true;
                    break;
                }
                // Partial step: drop the blocking constraint and retry p.
                let l = drop_at.expect("partial step has a blocking constraint");
                in_active[active[l]] = false;
                active.remove(l);
                u.remove(l);
                for i in 0..q {
                    for k in l..q - 1 {
                        r[i * n + k] = r[i * n + k + 1];
                    }
                    r[i * n + q - 1] = 0.0;
                }
                for j in l..q - 1 {
                    let (c, s, h) = givens(r[j * n + j], r[(j + 1) * n + j]);
                    if s == 0.0 {
                        continue;
                    }
                    r[j * n + j] = h;
                    r[(j + 1) * n + j] = 0.0;
                    for k in j + 1..q - 1 {
                        let (a, b) = (r[j * n + k], r[(j + 1) * n + k]);
                        r[j * n + k] = c * a + s * b;
                        r[(j + 1) * n + k] = -s * a + c * b;
                    }
                    for k in 0..n {
                        let (a, b) = (jm[k * n + j], jm[k * n + j + 1]);
                        jm[k * n + j] = c * a + s * b;
                        jm[k * n + j + 1] = -s * a + c * b;
                    }
                }
            }
        }
    }
}

/// One-shot convenience for a single problem.
pub fn solve_qp(hessian: &[f64], linear: &[f64], cons: &Constraints) -> Result<QpSolution> {
    QpSolver::new(hessian, linear.len())?.solve(linear, cons)
}
