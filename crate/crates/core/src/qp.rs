//! Convex QPs over the selection polytopes.
//!
//! Problems are `min ½xᵀHx + cᵀx` over one of four feasible sets, each with a
//! cheap Euclidean projection. The solver is an accelerated projected gradient
//! method that only accepts steps which lower the objective, restarting the
//! momentum otherwise.

use nalgebra::DVector;
use thiserror::Error;

use crate::numerics::RMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("feasible set is empty: {0}")]
    Infeasible(String),
    #[error("projection did not reach tolerance: {0}")]
    Tolerance(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Constraint {
    /// `0 ≤ x ≤ 1`, `Σ wᵢxᵢ² ≤ budget`.
    BoxBall { weights: Vec<f64>, budget: f64 },
    /// `BoxBall` plus `Σ xᵢ = total`.
    BoxBallSum {
        weights: Vec<f64>,
        budget: f64,
        total: f64,
    },
    /// `L` row blocks of length `N_R`, each on the simplex, column sums ≤ 1.
    AssignmentPolytope { l: usize, n_r: usize },
    /// `blocks` consecutive simplices of length `block_len`.
    BlockSimplex { blocks: usize, block_len: usize },
}

impl Constraint {
    pub fn dim(&self) -> usize {
        match self {
            Constraint::BoxBall { weights, .. } | Constraint::BoxBallSum { weights, .. } => {
                weights.len()
            }
            Constraint::AssignmentPolytope { l, n_r } => l * n_r,
            Constraint::BlockSimplex { blocks, block_len } => blocks * block_len,
        }
    }

    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>, QpError> {
        if v.len() != self.dim() {
            return Err(QpError::Shape(format!(
                "vector of length {} for a set of dimension {}",
                v.len(),
                self.dim()
            )));
        }
        match self {
            Constraint::BoxBall { weights, budget } => project_box_ball(v, weights, *budget),
            Constraint::BoxBallSum {
                weights,
                budget,
                total,
            } => project_box_ball_sum(v, weights, *budget, *total),
            Constraint::AssignmentPolytope { l, n_r } => Ok(project_assignment(v, *l, *n_r).x),
            Constraint::BlockSimplex { block_len, .. } => {
                let mut out = Vec::with_capacity(v.len());
                for chunk in v.chunks(*block_len) {
                    out.extend(project_simplex(chunk));
                }
                Ok(out)
            }
        }
    }

    /// Largest constraint violation of `x`.
    pub fn violation(&self, x: &[f64]) -> f64 {
        let box_viol = x
            .iter()
            .map(|&v| (-v).max(v - 1.0).max(0.0))
            .fold(0.0, f64::max);
        match self {
            Constraint::BoxBall { weights, budget } => {
                let s: f64 = x.iter().zip(weights).map(|(a, w)| w * a * a).sum();
                box_viol.max((s - budget).max(0.0) / budget.max(f64::MIN_POSITIVE))
            }
            Constraint::BoxBallSum {
                weights,
                budget,
                total,
            } => {
                let s: f64 = x.iter().zip(weights).map(|(a, w)| w * a * a).sum();
                let sum: f64 = x.iter().sum();
                box_viol
                    .max((s - budget).max(0.0) / budget.max(f64::MIN_POSITIVE))
                    .max((sum - total).abs())
            }
            Constraint::AssignmentPolytope { l, n_r } => {
                let mut worst = box_viol;
                for i in 0..*l {
                    let s: f64 = x[i * n_r..(i + 1) * n_r].iter().sum();
                    worst = worst.max((s - 1.0).abs());
                }
                for j in 0..*n_r {
                    let s: f64 = (0..*l).map(|i| x[i * n_r + j]).sum();
                    worst = worst.max(s - 1.0);
                }
                worst
            }
            Constraint::BlockSimplex { block_len, .. } => {
                let mut worst = box_viol;
                for chunk in x.chunks(*block_len) {
                    worst = worst.max((chunk.iter().sum::<f64>() - 1.0).abs());
                }
                worst
            }
        }
    }
}

/// Euclidean projection onto `{x ≥ 0, Σx = 1}`.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    project_scaled_simplex(v, 1.0)
}

fn project_scaled_simplex(v: &[f64], total: f64) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        cum += uk;
        let t = (cum - total) / (k + 1) as f64;
        if uk - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

const BISECT_ITERS: usize = 200;

/// Euclidean projection onto `{0 ≤ x ≤ 1} ∩ {Σ wᵢxᵢ² ≤ budget}` by bisection
/// on the ball multiplier.
pub fn project_box_ball(v: &[f64], weights: &[f64], budget: f64) -> Result<Vec<f64>, QpError> {
    if v.len() != weights.len() {
        return Err(QpError::Shape("weights and vector differ in length".into()));
    }
    if !(budget > 0.0) || weights.iter().any(|&w| !(w > 0.0)) {
        return Err(QpError::Infeasible(
            "box-ball needs positive weights and budget".into(),
        ));
    }
    let at = |lam: f64| -> Vec<f64> {
        v.iter()
            .zip(weights)
            .map(|(&x, &w)| clamp01(x / (1.0 + 2.0 * lam * w)))
            .collect()
    };
    let load = |x: &[f64]| -> f64 { x.iter().zip(weights).map(|(a, w)| w * a * a).sum() };
    let x0 = at(0.0);
    if load(&x0) <= budget {
        return Ok(x0);
    }
    let mut hi = 1.0 / weights.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut grow = 0;
    while load(&at(hi)) > budget {
        hi *= 4.0;
        grow += 1;
        if grow > 2000 {
            return Err(QpError::Tolerance(
                "could not bracket the ball multiplier".into(),
            ));
        }
    }
    let mut lo = 0.0;
    for _ in 0..BISECT_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if load(&at(mid)) > budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let x = at(hi);
    if load(&x) > budget * (1.0 + 1e-12) {
        return Err(QpError::Tolerance("ball multiplier bisection".into()));
    }
    Ok(x)
}

/// For fixed ball multiplier, the sum multiplier that meets `Σx = total`.
fn sum_shift(v: &[f64], weights: &[f64], lam: f64, total: f64) -> Vec<f64> {
    let at = |nu: f64| -> Vec<f64> {
        v.iter()
            .zip(weights)
            .map(|(&x, &w)| clamp01((x + nu) / (1.0 + 2.0 * lam * w)))
            .collect()
    };
    let sum = |x: &[f64]| x.iter().sum::<f64>();
    let span = v.iter().fold(0.0f64, |m, x| m.max(x.abs())) + 1.0;
    let scale = 1.0 + 2.0 * lam * weights.iter().cloned().fold(0.0, f64::max);
    let (mut lo, mut hi) = (-span - scale, span + scale);
    for _ in 0..BISECT_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if sum(&at(mid)) < total {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Split the remaining rounding error over the free coordinates.
    let mut x = at(0.5 * (lo + hi));
    let err = total - sum(&x);
    let free: Vec<usize> = (0..x.len()).filter(|&i| x[i] > 0.0 && x[i] < 1.0).collect();
    if !free.is_empty() {
        let d = err / free.len() as f64;
        for i in free {
            x[i] = clamp01(x[i] + d);
        }
    }
    x
}

/// Euclidean projection onto `{0 ≤ x ≤ 1, Σ wᵢxᵢ² ≤ budget, Σxᵢ = total}`.
///
/// The outer bisection is on the ball multiplier; the ball load at the inner
/// optimum is the derivative of a concave dual function, hence monotone.
pub fn project_box_ball_sum(
    v: &[f64],
    weights: &[f64],
    budget: f64,
    total: f64,
) -> Result<Vec<f64>, QpError> {
    let n = v.len() as f64;
    if weights.len() != v.len() {
        return Err(QpError::Shape("weights and vector differ in length".into()));
    }
    if !(0.0..=n).contains(&total) {
        return Err(QpError::Infeasible(format!("sum {total} outside [0, {n}]")));
    }
    let load = |x: &[f64]| -> f64 { x.iter().zip(weights).map(|(a, w)| w * a * a).sum() };
    // Smallest achievable load with the given sum: xᵢ ∝ 1/wᵢ, capped at 1.
    let min_x = sum_shift(&vec![0.0; v.len()], weights, 1e12, total);
    if load(&min_x) > budget * (1.0 + 1e-9) {
        return Err(QpError::Infeasible(format!(
            "budget {budget:.3e} below the minimum load {:.3e} for sum {total}",
            load(&min_x)
        )));
    }
    let x0 = sum_shift(v, weights, 0.0, total);
    if load(&x0) <= budget {
        return Ok(x0);
    }
    let mut hi = 1.0 / weights.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut grow = 0;
    while load(&sum_shift(v, weights, hi, total)) > budget {
        hi *= 4.0;
        grow += 1;
        if grow > 60 {
            return Ok(min_x);
        }
    }
    let mut lo = 0.0;
    for _ in 0..BISECT_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if load(&sum_shift(v, weights, mid, total)) > budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(sum_shift(v, weights, hi, total))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentProjection {
    pub x: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

const DYKSTRA_TOL: f64 = 1e-12;
const DYKSTRA_SWEEPS: usize = 2000;

/// Projection onto the assignment polytope by Dykstra's method between the
/// row-simplex set and the column-capped box.
pub fn project_assignment(v: &[f64], l: usize, n_r: usize) -> AssignmentProjection {
    let rows = |x: &[f64]| -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        for chunk in x.chunks(n_r) {
            out.extend(project_simplex(chunk));
        }
        out
    };
    let cols = |x: &[f64]| -> Vec<f64> {
        let mut out = x.to_vec();
        let mut col = vec![0.0; l];
        for j in 0..n_r {
            for i in 0..l {
                col[i] = clamp01(x[i * n_r + j]);
            }
            if col.iter().sum::<f64>() > 1.0 {
                let c: Vec<f64> = (0..l).map(|i| x[i * n_r + j]).collect();
                col = project_simplex(&c);
            }
            for i in 0..l {
                out[i * n_r + j] = col[i];
            }
        }
        out
    };
    let dim = v.len();
    let mut x = v.to_vec();
    let mut p = vec![0.0; dim];
    let mut q = vec![0.0; dim];
    for sweep in 1..=DYKSTRA_SWEEPS {
        let xp: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + b).collect();
        let y = rows(&xp);
        for i in 0..dim {
            p[i] = xp[i] - y[i];
        }
        let yq: Vec<f64> = y.iter().zip(&q).map(|(a, b)| a + b).collect();
        let xn = cols(&yq);
        for i in 0..dim {
            q[i] = yq[i] - xn[i];
        }
        let change = xn
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let gap = xn
            .iter()
            .zip(&y)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        x = xn;
        if change <= DYKSTRA_TOL && gap <= DYKSTRA_TOL {
            return AssignmentProjection {
                x: polish_rows(&x, n_r),
                sweeps: sweep,
                converged: true,
            };
        }
    }
    AssignmentProjection {
        x: polish_rows(&x, n_r),
        sweeps: DYKSTRA_SWEEPS,
        converged: false,
    }
}

/// Rescales each row block to sum to one. Dykstra leaves row sums off by
/// about its stopping tolerance; this removes that without touching supports.
fn polish_rows(x: &[f64], n_r: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for chunk in out.chunks_mut(n_r) {
        let s: f64 = chunk.iter().sum();
        if s > 0.0 {
            for v in chunk.iter_mut() {
                *v /= s;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hessian: RMatrix,
    pub linear: Vec<f64>,
    pub constraint: Constraint,
}

impl QpProblem {
    pub fn objective(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        let hx = &self.hessian * &xv;
        0.5 * xv.dot(&hx) + x.iter().zip(&self.linear).map(|(a, b)| a * b).sum::<f64>()
    }

    fn check(&self) -> Result<(), QpError> {
        let n = self.constraint.dim();
        if self.hessian.shape() != (n, n) || self.linear.len() != n {
            return Err(QpError::Shape(format!(
                "hessian {:?}, linear {}, constraint dimension {n}",
                self.hessian.shape(),
                self.linear.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Unit-step fixed-point residual `‖x − P(x − ∇f(x))‖`.
    pub kkt_residual: f64,
    pub converged: bool,
}

/// Seam for swapping in another convex solver.
pub trait QpSolver: Sync {
    fn solve(&self, problem: &QpProblem, x0: &[f64]) -> Result<QpSolution, QpError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGradient {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ProjectedGradient {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 2000,
        }
    }
}

impl QpSolver for ProjectedGradient {
    fn solve(&self, problem: &QpProblem, x0: &[f64]) -> Result<QpSolution, QpError> {
        solve_qp(problem, x0, self.tol, self.max_iter)
    }
}

fn lipschitz(h: &RMatrix) -> f64 {
    let n = h.nrows();
    if n == 0 {
        return 0.0;
    }
    // Deterministic non-degenerate start.
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.1 * ((i * 7919) % 13) as f64);
    let mut est = 0.0;
    for _ in 0..30 {
        let hv = h * &v;
        let nrm = hv.norm();
        if nrm == 0.0 {
            return 0.0;
        }
        est = nrm / v.norm();
        v = hv / nrm;
    }
    est
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec(h: &RMatrix, x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut out = vec![0.0; n];
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let col = h.column(j);
        for i in 0..n {
            out[i] += col[i] * xj;
        }
    }
    out
}

/// Accelerated projected gradient with monotone acceptance.
///
/// Each iteration takes a projected gradient step of length `1/L` from the
/// extrapolated point. Steps that do not lower the objective reset the
/// momentum; steps that break the quadratic upper bound double `L`. The
/// unit-step residual is checked every ten iterations.
pub fn solve_qp(
    problem: &QpProblem,
    x0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<QpSolution, QpError> {
    problem.check()?;
    let c = &problem.linear;
    let h = &problem.hessian;
    let proj = |v: &[f64]| problem.constraint.project(v);
    let f_of = |x: &[f64], hx: &[f64]| 0.5 * dot(x, hx) + dot(c, x);
    let residual = |x: &[f64], hx: &[f64]| -> Result<f64, QpError> {
        let step: Vec<f64> = (0..x.len()).map(|i| x[i] - hx[i] - c[i]).collect();
        let p = proj(&step)?;
        Ok(p.iter()
            .zip(x)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt())
    };

    let mut x = if problem.constraint.violation(x0) <= 1e-9 {
        x0.to_vec()
    } else {
        proj(x0)?
    };
    let mut hx = matvec(h, &x);
    let fx = f_of(&x, &hx);
    let cnorm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut lip = (1.1 * lipschitz(h)).max(1e-12 * (cnorm + 1.0));

    let mut y = x.clone();
    let mut hy = hx.clone();
    let mut t = 1.0f64;
    let mut iters = 0;
    let mut res = residual(&x, &hx)?;
    if res <= tol {
        return Ok(QpSolution {
            x,
            objective: fx,
            iterations: 0,
            kkt_residual: res,
            converged: true,
        });
    }
    while iters < max_iter {
        iters += 1;
        let g: Vec<f64> = (0..y.len()).map(|i| hy[i] + c[i]).collect();
        let trial: Vec<f64> = (0..y.len()).map(|i| y[i] - g[i] / lip).collect();
        let z = proj(&trial)?;
        let hz = matvec(h, &z);
        // Objective differences are formed directly from the step so that
        // they stay accurate when the step is tiny.
        let dy: Vec<f64> = (0..z.len()).map(|i| z[i] - y[i]).collect();
        let rise_y: f64 = (0..z.len())
            .map(|i| dy[i] * (c[i] + 0.5 * (hy[i] + hz[i])))
            .sum();
        let bound = dot(&g, &dy) + 0.5 * lip * dot(&dy, &dy);
        if rise_y > bound + 1e-12 * bound.abs() + f64::MIN_POSITIVE {
            lip *= 2.0;
            continue;
        }
        let rise_x: f64 = (0..z.len())
            .map(|i| (z[i] - x[i]) * (c[i] + 0.5 * (hx[i] + hz[i])))
            .sum();
        if rise_x <= 0.0 {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            for i in 0..z.len() {
                y[i] = z[i] + beta * (z[i] - x[i]);
                hy[i] = hz[i] + beta * (hz[i] - hx[i]);
            }
            x = z;
            hx = hz;
            t = t_next;
        } else {
            t = 1.0;
            y.clone_from(&x);
            hy.clone_from(&hx);
        }
        if iters % 10 == 0 {
            res = residual(&x, &hx)?;
            if res <= tol {
                break;
            }
        }
    }
    if iters % 10 != 0 || iters == max_iter {
        res = residual(&x, &hx)?;
    }
    Ok(QpSolution {
        objective: f_of(&x, &hx),
        x,
        iterations: iters,
        kkt_residual: res,
        converged: res <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn simplex_examples() {
        assert!(close(&project_simplex(&[0.5, 0.5]), &[0.5, 0.5], 1e-15));
        assert!(close(&project_simplex(&[2.0, 0.0]), &[1.0, 0.0], 1e-15));
        let third = 1.0 / 3.0;
        assert!(close(
            &project_simplex(&[0.3, 0.3, 0.3]),
            &[third; 3],
            1e-15
        ));
    }

    #[test]
    fn simplex_matches_grid_oracle() {
        let v = [0.7, -0.2, 0.9];
        let p = project_simplex(&v);
        let mut best = (f64::INFINITY, [0.0; 3]);
        let n = 400;
        for i in 0..=n {
            for j in 0..=(n - i) {
                let x = [
                    i as f64 / n as f64,
                    j as f64 / n as f64,
                    (n - i - j) as f64 / n as f64,
                ];
                let d: f64 = x.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.0 {
                    best = (d, x);
                }
            }
        }
        assert!(close(&p, &best.1, 2.0 / n as f64));
    }

    #[test]
    fn box_ball_examples() {
        let w = vec![1.0; 3];
        assert_eq!(
            project_box_ball(&[0.2, 0.3, 0.1], &w, 10.0).unwrap(),
            vec![0.2, 0.3, 0.1]
        );
        let x = project_box_ball(&[1.0, 0.0, 0.0], &w, 0.25).unwrap();
        assert!(close(&x, &[0.5, 0.0, 0.0], 1e-12));
        let x = project_box_ball(&[1.7, -0.4, 0.6], &w, 3.0).unwrap();
        assert_eq!(x, vec![1.0, 0.0, 0.6]);
    }

    #[test]
    fn box_ball_matches_grid_on_2d_slice() {
        let v = [0.9, 0.8];
        let w = [2.0, 1.0];
        let budget = 0.6;
        let p = project_box_ball(&v, &w, budget).unwrap();
        let n = 1000;
        let mut best = (f64::INFINITY, [0.0; 2]);
        for i in 0..=n {
            for j in 0..=n {
                let x = [i as f64 / n as f64, j as f64 / n as f64];
                if w[0] * x[0] * x[0] + w[1] * x[1] * x[1] > budget {
                    continue;
                }
                let d = (x[0] - v[0]).powi(2) + (x[1] - v[1]).powi(2);
                if d < best.0 {
                    best = (d, x);
                }
            }
        }
        assert!(close(&p, &best.1, 3e-3), "{p:?} vs {:?}", best.1);
    }

    #[test]
    fn box_ball_sum_is_feasible_and_optimal_on_small_grid() {
        let v = [0.9, 0.2, 0.7];
        let w = [1.0, 2.0, 1.5];
        let c = Constraint::BoxBallSum {
            weights: w.to_vec(),
            budget: 1.2,
            total: 1.0,
        };
        let p = c.project(&v).unwrap();
        assert!(c.violation(&p) <= 1e-9, "{}", c.violation(&p));
        let d0: f64 = p.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum();
        let n = 300;
        for i in 0..=n {
            for j in 0..=(n - i) {
                let x = [
                    i as f64 / n as f64,
                    j as f64 / n as f64,
                    (n - i - j) as f64 / n as f64,
                ];
                if c.violation(&x) > 0.0 {
                    continue;
                }
                let d: f64 = x.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(d >= d0 - 1e-9);
            }
        }
        let bad = Constraint::BoxBallSum {
            weights: w.to_vec(),
            budget: 0.01,
            total: 2.0,
        };
        assert!(matches!(bad.project(&v), Err(QpError::Infeasible(_))));
    }

    #[test]
    fn assignment_examples() {
        let bin = [0.0, 1.0, 0.0, 1.0, 0.0, 0.0];
        let p = project_assignment(&bin, 2, 3);
        assert!(p.converged);
        assert!(close(&p.x, &bin, 1e-12));
        let v = [0.3, -0.1, 0.9, 0.2];
        assert!(close(
            &project_assignment(&v, 1, 4).x,
            &project_simplex(&v),
            1e-9
        ));
        let both = [1.0, 0.0, 1.0, 0.0];
        let p = project_assignment(&both, 2, 2);
        let c = Constraint::AssignmentPolytope { l: 2, n_r: 2 };
        assert!(c.violation(&p.x) <= 1e-7);
        // Symmetric input: both rows split evenly.
        assert!(close(&p.x, &[0.5, 0.5, 0.5, 0.5], 1e-6), "{:?}", p.x);
    }

    #[test]
    fn assignment_matches_grid_oracle() {
        // L=2, N_R=2: x = (s, 1−s, t, 1−t) with s + t ≤ 1 and (1−s)+(1−t) ≤ 1.
        let v = [0.9, 0.3, 0.8, 0.1];
        let p = project_assignment(&v, 2, 2);
        let n = 2000;
        let mut best = (f64::INFINITY, [0.0; 4]);
        for i in 0..=n {
            for j in 0..=n {
                let (s, t) = (i as f64 / n as f64, j as f64 / n as f64);
                if s + t > 1.0 + 1e-12 || 2.0 - s - t > 1.0 + 1e-12 {
                    continue;
                }
                let x = [s, 1.0 - s, t, 1.0 - t];
                let d: f64 = x.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.0 {
                    best = (d, x);
                }
            }
        }
        assert!(close(&p.x, &best.1, 2e-3), "{:?} vs {:?}", p.x, best.1);
    }

    fn psd(n: usize, seed: u64) -> RMatrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = RMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        &a * a.transpose()
    }

    #[test]
    fn solver_interior_and_simplex_cases() {
        let c = vec![0.3, 0.6, 0.2];
        let prob = QpProblem {
            hessian: RMatrix::identity(3, 3) * 2.0,
            linear: c.iter().map(|v| -2.0 * v).collect(),
            constraint: Constraint::BoxBall {
                weights: vec![1.0; 3],
                budget: 10.0,
            },
        };
        let s = solve_qp(&prob, &[0.0; 3], 1e-10, 5000).unwrap();
        assert!(close(&s.x, &c, 1e-8) && s.converged, "{s:?}");

        let prob = QpProblem {
            hessian: RMatrix::identity(2, 2) * 2.0,
            linear: vec![-4.0, 0.0],
            constraint: Constraint::BlockSimplex {
                blocks: 1,
                block_len: 2,
            },
        };
        let s = solve_qp(&prob, &[0.5, 0.5], 1e-10, 5000).unwrap();
        assert!(close(&s.x, &[1.0, 0.0], 1e-9));
    }

    #[test]
    fn solver_handles_zero_hessian() {
        let prob = QpProblem {
            hessian: RMatrix::zeros(4, 4),
            linear: vec![0.3, -0.2, 0.5, -0.7],
            constraint: Constraint::BlockSimplex {
                blocks: 2,
                block_len: 2,
            },
        };
        let s = solve_qp(&prob, &[0.5; 4], 1e-10, 1000).unwrap();
        assert!(close(&s.x, &[0.0, 1.0, 0.0, 1.0], 1e-9), "{:?}", s.x);
    }

    #[test]
    fn solver_is_monotone_from_start() {
        let h = psd(12, 3);
        let prob = QpProblem {
            hessian: h,
            linear: (0..12).map(|i| (i as f64 * 0.37).sin()).collect(),
            constraint: Constraint::AssignmentPolytope { l: 3, n_r: 4 },
        };
        let x0 = project_assignment(&[0.25; 12], 3, 4).x;
        let f0 = prob.objective(&x0);
        for iters in [1, 2, 5, 50] {
            let s = solve_qp(&prob, &x0, 0.0, iters).unwrap();
            assert!(s.objective <= f0 + 1e-15);
            assert!((prob.objective(&s.x) - s.objective).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn simplex_projection_is_idempotent_and_nonexpansive(
            u in prop::collection::vec(-3.0f64..3.0, 6),
            v in prop::collection::vec(-3.0f64..3.0, 6),
        ) {
            let pu = project_simplex(&u);
            let pv = project_simplex(&v);
            prop_assert!((pu.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(close(&project_simplex(&pu), &pu, 1e-12));
            let dp: f64 = pu.iter().zip(&pv).map(|(a, b)| (a - b).powi(2)).sum();
            let d: f64 = u.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum();
            prop_assert!(dp <= d + 1e-12);
        }

        #[test]
        fn box_ball_projection_is_idempotent_and_nonexpansive(
            u in prop::collection::vec(-1.0f64..2.0, 5),
            v in prop::collection::vec(-1.0f64..2.0, 5),
            w in prop::collection::vec(0.1f64..3.0, 5),
            budget in 0.05f64..4.0,
        ) {
            let pu = project_box_ball(&u, &w, budget).unwrap();
            let pv = project_box_ball(&v, &w, budget).unwrap();
            let c = Constraint::BoxBall { weights: w.clone(), budget };
            prop_assert!(c.violation(&pu) <= 1e-9);
            prop_assert!(close(&project_box_ball(&pu, &w, budget).unwrap(), &pu, 1e-9));
            let dp: f64 = pu.iter().zip(&pv).map(|(a, b)| (a - b).powi(2)).sum();
            let d: f64 = u.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum();
            prop_assert!(dp <= d + 1e-9);
        }

        #[test]
        fn assignment_projection_is_feasible_and_nonexpansive(
            u in prop::collection::vec(-1.0f64..2.0, 8),
            v in prop::collection::vec(-1.0f64..2.0, 8),
        ) {
            let c = Constraint::AssignmentPolytope { l: 2, n_r: 4 };
            let pu = project_assignment(&u, 2, 4).x;
            let pv = project_assignment(&v, 2, 4).x;
            prop_assert!(c.violation(&pu) <= 1e-7);
            prop_assert!(close(&project_assignment(&pu, 2, 4).x, &pu, 1e-6));
            let dp: f64 = pu.iter().zip(&pv).map(|(a, b)| (a - b).powi(2)).sum();
            let d: f64 = u.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum();
            prop_assert!(dp.sqrt() <= d.sqrt() + 1e-6);
        }
    }
}
