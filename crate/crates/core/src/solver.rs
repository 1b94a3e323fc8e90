//! Certified solver for `min_{rho in box} max_i (J_i(rho) - c_i)`.
//!
//! The epigraph problem `min beta s.t. J_i(rho) - c_i <= beta` is solved with
//! a log-barrier path-following method. Every outer iterate yields a primal
//! upper bound (the exact max at the iterate) and a dual lower bound: with
//! normalized barrier multipliers `lambda`, the weighted quadratic
//! `sum_i lambda_i (J_i - c_i)` underestimates the max everywhere, and its
//! linearization minimized over the box underestimates its minimum. The
//! solver stops once the two bounds are within the requested gap.
//!
//! Only scenarios violated at the current solution are handed to the
//! barrier method; the rest are checked after every round.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::synthesis::RegretProgram;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Certified optimality gap required for `converged`.
    pub tol: f64,
    /// Allowed constraint (box) violation of the returned point.
    pub feas_tol: f64,
    /// Points within this much of the best objective count as ties; among
    /// ties the one closest to the baseline is returned.
    pub tie_tol: f64,
    pub max_newton_steps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-6,
            feas_tol: 1e-8,
            tie_tol: 1e-13,
            max_newton_steps: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub upper: f64,
    pub lower: f64,
    pub active: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResult {
    pub rho_star: Vec<f64>,
    /// `max_i (J_i(rho_star) - c_i)`.
    pub beta_star: f64,
    /// Certified lower bound on the optimal value.
    pub lower_bound: f64,
    pub gap: f64,
    /// Newton steps taken.
    pub iterations: usize,
    pub max_violation: f64,
    pub converged: bool,
    pub active_scenario: usize,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

impl SynthesisResult {
    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "iteration,upper,lower,active")?;
        for r in &self.trace {
            writeln!(f, "{},{},{},{}", r.iteration, r.upper, r.lower, r.active)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Newton steps allowed per barrier parameter value.
const MAX_CENTERING_STEPS: usize = 200;
/// Scenarios added to the working set per round, as a multiple of `p + 1`.
const ADD_FACTOR: usize = 2;

struct Barrier<'a> {
    prog: &'a RegretProgram,
    lo: &'a [f64],
    hi: &'a [f64],
}

impl Barrier<'_> {
    /// Constraint slacks at `(rho, beta)`, or `None` outside the domain.
    fn slacks(&self, rho: &DVector<f64>, beta: f64) -> Option<Vec<f64>> {
        let mut s = Vec::with_capacity(self.prog.len() + 2 * rho.len());
        for (q, c) in self.prog.quadratics.iter().zip(&self.prog.costs) {
            s.push(beta - q.eval(rho) + c);
        }
        for j in 0..rho.len() {
            s.push(self.hi[j] - rho[j]);
            s.push(rho[j] - self.lo[j]);
        }
        s.iter().all(|&x| x > 0.0).then_some(s)
    }

    /// Change of the barrier objective, summed as log ratios so it stays
    /// accurate when the objective itself is large.
    fn change(t: f64, d_beta: f64, from: &[f64], to: &[f64]) -> f64 {
        t * d_beta - from.iter().zip(to).map(|(a, b)| (b / a).ln()).sum::<f64>()
    }

    fn newton_system(&self, t: f64, rho: &DVector<f64>, beta: f64) -> (DMatrix<f64>, DVector<f64>) {
        let p = rho.len();
        let mut hess = DMatrix::zeros(p + 1, p + 1);
        let mut grad = DVector::zeros(p + 1);
        grad[p] = t;
        let mut a = DVector::zeros(p + 1);
        for (q, c) in self.prog.quadratics.iter().zip(&self.prog.costs) {
            let s = beta - q.eval(rho) + c;
            let inv = 1.0 / s;
            let gq = q.gradient(rho);
            a.rows_mut(0, p).copy_from(&gq);
            a[p] = -1.0;
            grad.axpy(inv, &a, 1.0);
            hess.ger(inv * inv, &a, &a, 1.0);
            hess.view_mut((0, 0), (p, p)).zip_apply(&q.h, |x, h| *x += 2.0 * inv * h);
        }
        for j in 0..p {
            let (da, db) = (self.hi[j] - rho[j], rho[j] - self.lo[j]);
            grad[j] += 1.0 / da - 1.0 / db;
            hess[(j, j)] += 1.0 / (da * da) + 1.0 / (db * db);
        }
        (hess, grad)
    }
}

fn solve_spd(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = h.clone().cholesky() {
        return Some(ch.solve(rhs));
    }
    let ridge = 1e-12 * h.diagonal().amax().max(1e-300);
    let mut hr = h.clone();
    for i in 0..hr.nrows() {
        hr[(i, i)] += ridge;
    }
    hr.cholesky().map(|ch| ch.solve(rhs)).or_else(|| h.clone().lu().solve(rhs))
}

/// Lower bound from multipliers `lambda` (any nonnegative weights).
fn dual_bound(prog: &RegretProgram, lambda: &[f64], start: &DVector<f64>) -> f64 {
    let total: f64 = lambda.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return f64::NEG_INFINITY;
    }
    let p = prog.dim();
    let mut h = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    let mut d = 0.0;
    for ((q, c), &l) in prog.quadratics.iter().zip(&prog.costs).zip(lambda) {
        let w = l / total;
        h.zip_apply(&q.h, |x, y| *x += w * y);
        b.axpy(w, &q.b, 1.0);
        d += w * (q.e - c);
    }
    let (lo, hi) = (&prog.bounds.lower, &prog.bounds.upper);
    let phi = |r: &DVector<f64>| d - 2.0 * b.dot(r) + r.dot(&(&h * r));
    let linear_bound = |r: &DVector<f64>| {
        let g = (&h * r - &b) * 2.0;
        phi(r)
            + (0..p)
                .map(|j| (g[j] * (lo[j] - r[j])).min(g[j] * (hi[j] - r[j])))
                .sum::<f64>()
    };

    let mut r = start.clone();
    let mut best = linear_bound(&r);
    // a few projected Newton steps on the aggregate tighten the linearization
    for _ in 0..20 {
        let g = (&h * &r - &b) * 2.0;
        let free: Vec<usize> = (0..p)
            .filter(|&j| !((r[j] <= lo[j] && g[j] > 0.0) || (r[j] >= hi[j] && g[j] < 0.0)))
            .collect();
        if free.is_empty() {
            break;
        }
        let hf = DMatrix::from_fn(free.len(), free.len(), |i, k| 2.0 * h[(free[i], free[k])]);
        let gf = DVector::from_fn(free.len(), |i, _| -g[free[i]]);
        let Some(step) = hf.cholesky().map(|ch| ch.solve(&gf)) else {
            break;
        };
        let mut next = r.clone();
        for (i, &j) in free.iter().enumerate() {
            next[j] = (r[j] + step[i]).clamp(lo[j], hi[j]);
        }
        let lb = linear_bound(&next);
        let moved = (&next - &r).amax();
        r = next;
        best = best.max(lb);
        if moved <= 1e-15 * (1.0 + r.amax()) {
            break;
        }
    }
    best
}

/// Pushes `rho` strictly inside the box.
fn interior(prog: &RegretProgram, rho: &DVector<f64>) -> DVector<f64> {
    let (lo, hi) = (&prog.bounds.lower, &prog.bounds.upper);
    DVector::from_fn(prog.dim(), |j, _| {
        let margin = 1e-3 * (hi[j] - lo[j]);
        rho[j].clamp(lo[j] + margin, hi[j] - margin)
    })
}

struct BarrierRun {
    /// Outer iterates, last one best centered.
    iterates: Vec<DVector<f64>>,
    lower: f64,
    upper: f64,
    steps: usize,
}

/// Path-following on a (small) program from an interior point.
fn barrier_solve(prog: &RegretProgram, start: &DVector<f64>, target: f64, step_budget: usize) -> BarrierRun {
    let p = prog.dim();
    let m_total = (prog.len() + 2 * p) as f64;
    let barrier = Barrier {
        prog,
        lo: &prog.bounds.lower,
        hi: &prog.bounds.upper,
    };
    let mut rho = start.clone();
    let (f0, _) = prog.objective(&rho);
    let scale = prog
        .quadratics
        .iter()
        .zip(&prog.costs)
        .map(|(q, c)| q.eval(&rho).abs() + c.abs())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let s0 = 0.1 * scale;
    let mut beta = f0 + s0;
    let mut t = m_total / s0;

    let mut run = BarrierRun {
        iterates: Vec::new(),
        lower: f64::NEG_INFINITY,
        upper: f64::INFINITY,
        steps: 0,
    };
    for _ in 0..200 {
        let mut slack = barrier.slacks(&rho, beta).expect("iterates stay interior");
        for _ in 0..MAX_CENTERING_STEPS {
            if run.steps >= step_budget {
                break;
            }
            let (hess, grad) = barrier.newton_system(t, &rho, beta);
            let Some(dx) = solve_spd(&hess, &(-&grad)) else {
                break;
            };
            let decrement = -grad.dot(&dx);
            if !(decrement > 1e-10) {
                break;
            }
            run.steps += 1;
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let r_new = &rho + dx.rows(0, p) * step;
                let b_new = beta + dx[p] * step;
                if let Some(s_new) = barrier.slacks(&r_new, b_new) {
                    if Barrier::change(t, b_new - beta, &slack, &s_new) <= -0.25 * step * decrement {
                        rho = r_new;
                        beta = b_new;
                        slack = s_new;
                        accepted = true;
                        break;
                    }
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }

        let (upper, _) = prog.objective(&rho);
        let lambda: Vec<f64> = slack[..prog.len()].iter().map(|s| 1.0 / s).collect();
        run.lower = run.lower.max(dual_bound(prog, &lambda, &rho));
        run.upper = run.upper.min(upper);
        run.iterates.push(rho.clone());
        if run.upper - run.lower <= target
            || m_total / t <= 1e-15 * (scale + run.upper.abs())
            || run.steps >= step_budget
        {
            break;
        }
        t *= 10.0;
    }
    run
}

fn subset(prog: &RegretProgram, idx: &[usize]) -> RegretProgram {
    RegretProgram {
        quadratics: idx.iter().map(|&i| prog.quadratics[i].clone()).collect(),
        costs: idx.iter().map(|&i| prog.costs[i]).collect(),
        rho_b: prog.rho_b.clone(),
        bounds: prog.bounds.clone(),
    }
}

/// Indices of the `k` largest values not yet in `working` that exceed `level`.
fn most_violated(values: &[f64], working: &[usize], level: f64, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len())
        .filter(|i| values[*i] > level && !working.contains(i))
        .collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Minimizes the worst-case regret of `prog` over its box.
///
/// Scenarios enter a working set only when they are violated at the current
/// solution; the working-set optimum bounds the full optimum from below.
pub fn solve_min_max_regret(prog: &RegretProgram, opts: &SolverOptions) -> SynthesisResult {
    let p = prog.dim();
    let batch = ADD_FACTOR * (p + 1);
    let mut start = interior(prog, &prog.rho_b);
    let scale = prog
        .quadratics
        .iter()
        .zip(&prog.costs)
        .map(|(q, c)| q.eval(&start).abs() + c.abs())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let target = (opts.tol * 1e-8).max(1e-14 * scale);

    let mut candidates: Vec<(DVector<f64>, f64)> = Vec::new();
    if prog.bounds.contains(prog.rho_b.as_slice()) {
        candidates.push((prog.rho_b.clone(), prog.objective(&prog.rho_b).0));
    }
    let mut working = most_violated(&prog.scenario_values(&start), &[], f64::NEG_INFINITY, batch);
    working.sort_unstable();
    let mut lower = f64::NEG_INFINITY;
    let mut trace = Vec::new();
    let mut steps = 0usize;

    for round in 0..prog.len() {
        let sub = subset(prog, &working);
        let run = barrier_solve(&sub, &start, target, opts.max_newton_steps.saturating_sub(steps));
        steps += run.steps;
        lower = lower.max(run.lower);
        for r in &run.iterates {
            candidates.push((r.clone(), prog.objective(r).0));
        }
        let last = run.iterates.last().cloned().unwrap_or_else(|| start.clone());
        let values = prog.scenario_values(&last);
        let (upper, active) = prog.objective(&last);
        let best_upper = candidates.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
        trace.push(TraceRow {
            iteration: round,
            upper: best_upper,
            lower,
            active,
        });
        if best_upper - lower <= target || steps >= opts.max_newton_steps {
            break;
        }
        let sub_max = working.iter().map(|&i| values[i]).fold(f64::NEG_INFINITY, f64::max);
        let added = most_violated(&values, &working, sub_max.max(upper - (upper - lower) * 0.5), batch);
        let added = if added.is_empty() {
            most_violated(&values, &working, sub_max, batch)
        } else {
            added
        };
        if added.is_empty() {
            break;
        }
        working.extend(added);
        working.sort_unstable();
        start = interior(prog, &last);
    }

    let best_upper = candidates.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let (rho_star, beta_star) = candidates
        .iter()
        .filter(|c| c.1 <= best_upper + opts.tie_tol)
        .min_by(|a, b| {
            let da = (&a.0 - &prog.rho_b).norm();
            let db = (&b.0 - &prog.rho_b).norm();
            da.total_cmp(&db)
        })
        .map(|c| (c.0.clone(), c.1))
        .expect("at least one candidate");

    let (_, active_scenario) = prog.objective(&rho_star);
    let box_violation = (0..p)
        .map(|j| {
            (prog.bounds.lower[j] - rho_star[j])
                .max(rho_star[j] - prog.bounds.upper[j])
                .max(0.0)
        })
        .fold(0.0f64, f64::max);
    let gap = beta_star - lower;
    SynthesisResult {
        rho_star: rho_star.iter().copied().collect(),
        beta_star,
        lower_bound: lower,
        gap,
        iterations: steps,
        max_violation: box_violation,
        converged: gap <= opts.tol && box_violation <= opts.feas_tol,
        active_scenario,
        trace,
    }
}

/// Plain min-max: the same scenarios without baseline costs.
pub fn solve_min_max(prog: &RegretProgram, opts: &SolverOptions) -> SynthesisResult {
    solve_min_max_regret(&prog.without_baseline(), opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthesis::{Bounds, ScenarioQuadratic};

    /// `(rho - a)^2`.
    fn shifted(a: f64) -> ScenarioQuadratic {
        ScenarioQuadratic::new(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, a), a * a).unwrap()
    }

    #[test]
    fn symmetric_disagreement_returns_baseline() {
        let prog = RegretProgram::new(vec![shifted(1.0), shifted(-1.0)], vec![0.0], Bounds::uniform(1, -10.0, 10.0))
            .unwrap();
        let r = solve_min_max_regret(&prog, &SolverOptions::default());
        assert!(r.converged);
        assert_eq!(r.rho_star, vec![0.0]);
        assert_eq!(r.beta_star, 0.0);
        let mm = solve_min_max(&prog, &SolverOptions::default());
        assert!(mm.converged);
        assert!(mm.rho_star[0].abs() < 1e-3);
        assert!((mm.beta_star - 1.0).abs() < 1e-6);
    }

    #[test]
    fn single_scenario_min_max_is_unconstrained_minimizer() {
        let q = ScenarioQuadratic::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            DVector::from_vec(vec![1.0, -0.5]),
            3.0,
        )
        .unwrap();
        let expect = q.h.clone().lu().solve(&q.b).unwrap();
        let prog = RegretProgram::new(vec![q], vec![0.0, 0.0], Bounds::uniform(2, -10.0, 10.0)).unwrap();
        let r = solve_min_max(&prog, &SolverOptions::default());
        assert!(r.converged);
        for j in 0..2 {
            assert!((r.rho_star[j] - expect[j]).abs() < 1e-6, "{:?} vs {expect}", r.rho_star);
        }
    }

    #[test]
    fn box_constraint_is_respected() {
        let prog = RegretProgram::new(vec![shifted(5.0)], vec![0.0], Bounds::uniform(1, -1.0, 2.0)).unwrap();
        let r = solve_min_max(&prog, &SolverOptions::default());
        assert!(r.converged);
        assert!((r.rho_star[0] - 2.0).abs() < 1e-6);
        assert!(r.rho_star[0] <= 2.0);
    }

    #[test]
    fn trace_is_written() {
        let prog = RegretProgram::new(vec![shifted(1.0), shifted(0.5)], vec![0.0], Bounds::uniform(1, -3.0, 3.0))
            .unwrap();
        let r = solve_min_max_regret(&prog, &SolverOptions::default());
        assert!(!r.trace.is_empty());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        r.write_trace_csv(&path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.starts_with("iteration,upper,lower,active\n"));
        assert_eq!(text.lines().count(), r.trace.len() + 1);
        for row in &r.trace {
            assert!(row.lower <= row.upper + 1e-12);
        }
    }
}
