//! General nonlinear programming layer: an augmented Lagrangian method whose
//! inner subproblems are minimized by a damped Gauss–Newton iteration on the
//! penalty structure, plus a registry so an external solver backend can take
//! over the same problem interface.
//!
//! Constraints are carried in box form l ≤ g(y) ≤ u, which covers equalities
//! (l = u), one-sided rows (±∞ on the free side), and genuine two-sided
//! limits with a single multiplier vector. The augmented Lagrangian of a box
//! system is
//!
//!   L(y; μ, ρ) = f(y) + (ρ/2)‖v − Π(v)‖² − ‖μ‖²/(2ρ),   v = g(y) + μ/ρ,
//!
//! with Π the projection onto [l, u]; the multiplier update is
//! μ ← ρ(v − Π(v)) evaluated at the inner minimizer.

use nalgebra::{DMatrix, DVector};
use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("evaluation failed {consecutive} times in a row: {last}")]
    EvalFailure { consecutive: usize, last: String },
    #[error("no solver backend registered under \"{0}\"")]
    UnknownBackend(String),
    #[error("problem reported {0} constraint rows but bounds of different length")]
    BadBounds(usize),
}

/// One evaluation of cost, constraints, and (optionally) their derivatives.
/// `jac` holds the constraint Jacobian values in the order of the problem's
/// sparsity pattern; it and `cost_grad` stay empty when gradients were not
/// requested.
#[derive(Clone, Debug, Default)]
pub struct Evaluation {
    pub cost: f64,
    pub cost_grad: DVector<f64>,
    pub cons: DVector<f64>,
    pub jac: Vec<f64>,
}

/// A smooth NLP with box constraints on the constraint values:
/// minimize f(y) subject to l ≤ g(y) ≤ u.
pub trait NlpProblem {
    fn n_vars(&self) -> usize;
    fn n_cons(&self) -> usize;
    /// Lower and upper bounds of the constraint rows (±∞ where one-sided).
    fn bounds(&self) -> (DVector<f64>, DVector<f64>);
    /// Nonzero positions (row, col) of the constraint Jacobian, fixed for
    /// the problem's lifetime.
    fn jacobian_pattern(&self) -> Vec<(usize, usize)>;
    /// Evaluates everything at `y`. Gradients may be skipped when
    /// `want_grad` is false (line-search probes).
    fn eval_all(&self, y: &DVector<f64>, want_grad: bool) -> Result<Evaluation, String>;
    /// Optional bounds on the variables themselves.
    fn var_bounds(&self) -> Option<(DVector<f64>, DVector<f64>)> {
        None
    }
    /// Starting point for the solve; the origin unless the problem knows
    /// better.
    fn initial_point(&self) -> DVector<f64> {
        DVector::zeros(self.n_vars())
    }
    /// Called whenever the solver accepts `y` as its new iterate. Problems
    /// with internal warm-start state should advance it here and nowhere
    /// else, so that rejected probes leave no trace.
    fn note_accept(&self, _y: &DVector<f64>) {}
}

#[derive(Clone, Debug)]
pub struct SolveOptions {
    /// Outer (multiplier update) iteration limit.
    pub max_outer: usize,
    /// Feasibility target: ‖g − Π(g)‖∞.
    pub violation_tol: f64,
    pub rho_init: f64,
    /// Penalty growth factor, applied only when an outer iteration fails to
    /// halve the violation.
    pub rho_growth: f64,
    /// Penalty ceiling. Beyond this the multiplier updates alone have to
    /// close the gap; growing ρ further only poisons the inner conditioning.
    pub rho_max: f64,
    /// Inner iteration budget per outer iteration.
    pub max_inner: usize,
    /// Print one line per outer iteration to stderr.
    pub verbose: bool,
    /// Name of a registered external backend; `None` runs the built-in.
    pub backend: Option<String>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            max_outer: 200,
            violation_tol: 1e-4,
            rho_init: 10.0,
            rho_growth: 5.0,
            rho_max: 1e5,
            max_inner: 100,
            verbose: false,
            backend: None,
        }
    }
}

/// One progress row: wall-clock seconds since the solve started, current
/// feasibility violation, current cost.
#[derive(Clone, Copy, Debug)]
pub struct TraceRow {
    pub wall_time: f64,
    pub violation: f64,
    pub cost: f64,
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub y: DVector<f64>,
    pub cost: f64,
    /// ‖g − Π(g)‖∞ at the returned point.
    pub violation: f64,
    /// ‖∇f + Jᵀμ‖∞ at the returned point with the final multipliers.
    pub stationarity: f64,
    pub multipliers: DVector<f64>,
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub converged: bool,
    pub trace: Vec<TraceRow>,
}

/// What an external backend is able to consume.
#[derive(Clone, Copy, Debug)]
pub struct BackendCaps {
    pub supports_sparse_jacobian: bool,
}

type BackendFn =
    dyn Fn(&dyn NlpProblem, &SolveOptions) -> Result<SolveResult, SolverError> + Send + Sync;

struct Backend {
    caps: BackendCaps,
    run: Box<BackendFn>,
}

fn registry() -> &'static Mutex<HashMap<String, Backend>> {
    static REG: OnceLock<Mutex<HashMap<String, Backend>>> = OnceLock::new();
    REG.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Makes an external solver available under `name`. The backend receives
/// the same problem interface as the built-in solver; its declared
/// capabilities are retrievable via [`backend_caps`].
pub fn register_external_solver<F>(name: &str, caps: BackendCaps, run: F)
where
    F: Fn(&dyn NlpProblem, &SolveOptions) -> Result<SolveResult, SolverError>
        + Send
        + Sync
        + 'static,
{
    registry().lock().unwrap().insert(
        name.to_string(),
        Backend {
            caps,
            run: Box::new(run),
        },
    );
}

/// Capabilities of a registered backend, if any.
pub fn backend_caps(name: &str) -> Option<BackendCaps> {
    registry().lock().unwrap().get(name).map(|b| b.caps)
}

/// Entry point: dispatches to a registered backend when one is named,
/// otherwise runs the built-in augmented Lagrangian solver.
pub fn solve(problem: &dyn NlpProblem, opts: &SolveOptions) -> Result<SolveResult, SolverError> {
    if let Some(name) = &opts.backend {
        let reg = registry().lock().unwrap();
        let be = reg
            .get(name)
            .ok_or_else(|| SolverError::UnknownBackend(name.clone()))?;
        return (be.run)(problem, opts);
    }
    solve_builtin(problem, opts)
}

fn project(v: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(v.len(), v.iter().zip(lo.iter().zip(hi.iter())).map(|(&x, (&l, &h))| x.clamp(l, h)))
}

fn violation_of(cons: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> f64 {
    if cons.is_empty() {
        return 0.0;
    }
    (cons - project(cons, lo, hi)).amax()
}

struct EvalGuard {
    consecutive: usize,
    last: String,
}

impl EvalGuard {
    const LIMIT: usize = 20;

    fn new() -> Self {
        EvalGuard {
            consecutive: 0,
            last: String::new(),
        }
    }

    fn note<T>(&mut self, r: Result<T, String>) -> Result<Option<T>, SolverError> {
        match r {
            Ok(v) => {
                self.consecutive = 0;
                Ok(Some(v))
            }
            Err(e) => {
                self.consecutive += 1;
                self.last = e;
                if self.consecutive >= Self::LIMIT {
                    Err(SolverError::EvalFailure {
                        consecutive: self.consecutive,
                        last: std::mem::take(&mut self.last),
                    })
                } else {
                    Ok(None)
                }
            }
        }
    }
}

fn solve_builtin(problem: &dyn NlpProblem, opts: &SolveOptions) -> Result<SolveResult, SolverError> {
    let n = problem.n_vars();
    let m = problem.n_cons();
    let (lo, hi) = problem.bounds();
    if lo.len() != m || hi.len() != m {
        return Err(SolverError::BadBounds(m));
    }
    let pattern = problem.jacobian_pattern();
    let vb = problem.var_bounds();
    let clamp_vars = |y: &mut DVector<f64>| {
        if let Some((vl, vu)) = &vb {
            for i in 0..y.len() {
                y[i] = y[i].clamp(vl[i], vu[i]);
            }
        }
    };

    let start = Instant::now();
    let mut trace: Vec<TraceRow> = Vec::new();
    let mut guard = EvalGuard::new();

    let mut y = problem.initial_point();
    debug_assert_eq!(y.len(), n);
    clamp_vars(&mut y);
    let mut mu = DVector::zeros(m);
    let mut rho = opts.rho_init;

    // first full evaluation; retry is meaningless at a fixed point, so a
    // failure here is fatal early
    let mut ev = match guard.note(problem.eval_all(&y, true))? {
        Some(ev) => ev,
        None => {
            return Err(SolverError::EvalFailure {
                consecutive: 1,
                last: "initial evaluation failed".into(),
            })
        }
    };
    trace.push(TraceRow {
        wall_time: start.elapsed().as_secs_f64(),
        violation: violation_of(&ev.cons, &lo, &hi),
        cost: ev.cost,
    });

    // Row scaling: the quadratic penalty squares any spread in the row
    // magnitudes, so rows are normalized by their gradient norm at the start
    // point. All augmented-Lagrangian math runs on the scaled rows; the
    // violation reported (and tested against `violation_tol`) stays in the
    // problem's own units.
    let mut scale = DVector::from_element(m, 1.0f64);
    for (k, &(r, _)) in pattern.iter().enumerate() {
        scale[r] = scale[r].max(ev.jac[k].abs());
    }
    let slo = DVector::from_fn(m, |r, _| lo[r] / scale[r]);
    let shi = DVector::from_fn(m, |r, _| hi[r] / scale[r]);
    let scons = |ev: &Evaluation| DVector::from_fn(m, |r, _| ev.cons[r] / scale[r]);

    // augmented Lagrangian value and gradient from an evaluation; μ lives on
    // the scaled rows
    let al_of = |ev: &Evaluation, mu: &DVector<f64>, rho: f64| -> f64 {
        let v = scons(ev) + mu / rho;
        let p = &v - project(&v, &slo, &shi);
        ev.cost + 0.5 * rho * p.norm_squared() - mu.norm_squared() / (2.0 * rho)
    };
    let al_grad = |ev: &Evaluation, mu: &DVector<f64>, rho: f64| -> DVector<f64> {
        let v = scons(ev) + mu / rho;
        let p = &v - project(&v, &slo, &shi);
        let mut g = ev.cost_grad.clone();
        for (k, &(r, c)) in pattern.iter().enumerate() {
            g[c] += rho * ev.jac[k] / scale[r] * p[r];
        }
        g
    };

    // Pattern entries grouped by constraint row and sorted by column, for
    // assembling the Gauss–Newton model of the penalty term.
    let mut row_entries: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (k, &(r, _)) in pattern.iter().enumerate() {
        row_entries[r].push(k);
    }
    for es in &mut row_entries {
        es.sort_by_key(|&k| pattern[k].1);
    }

    let mut inner_total = 0usize;
    let mut outer_done = 0usize;
    let mut prev_violation = f64::INFINITY;
    // With no constraint rows the outer loop degenerates to one plain
    // minimization, so the inner tolerance is the final answer's accuracy.
    let mut inner_tol = if m == 0 { 1e-8_f64 } else { 1e-2_f64 };
    let mut converged = false;

    // Quasi-Newton estimate of the Lagrangian Hessian ∇²f + Σ μᵣ∇²g̃ᵣ, the
    // part of the curvature the penalty's Gauss–Newton term cannot see. It
    // is kept across outer iterations; Powell damping keeps it positive
    // definite.
    let mut bf = DMatrix::<f64>::identity(n, n);
    // Gradient of f + μᵀg̃ at a point, with μ held fixed.
    let lag_grad = |ev: &Evaluation, mu: &DVector<f64>| -> DVector<f64> {
        let mut g = ev.cost_grad.clone();
        for (k, &(r, c)) in pattern.iter().enumerate() {
            g[c] += ev.jac[k] / scale[r] * mu[r];
        }
        g
    };

    'outer: for outer in 0..opts.max_outer {
        outer_done = outer + 1;
        // ---- inner minimization of L(·; μ, ρ) --------------------------
        // Damped Newton steps on a model with two parts: the exact
        // Gauss–Newton curvature ρ J̃ᵀJ̃ of the penalty over the rows whose
        // shifted residual is outside its box, and the BFGS estimate of the
        // cost curvature; a Levenberg-style diagonal shift covers the rest.
        let mut lval = al_of(&ev, &mu, rho);
        let mut delta = 1e-3_f64;
        let mut stall = 0usize;
        let mut inner_used = 0usize;
        let mut gl_exit = f64::NAN;
        'inner: for _ in 0..opts.max_inner {
            let grad = al_grad(&ev, &mu, rho);
            gl_exit = grad.amax();
            if gl_exit <= inner_tol {
                break;
            }
            let v = scons(&ev) + &mu / rho;
            let p = &v - project(&v, &slo, &shi);
            // Lower triangle of the model (row entries are sorted by column,
            // so k2 ≥ k1 lands at row ≥ col), mirrored once.
            let mut b = bf.clone();
            for r in 0..m {
                if p[r] == 0.0 {
                    continue;
                }
                let w = rho / (scale[r] * scale[r]);
                let es = &row_entries[r];
                for (j1, &k1) in es.iter().enumerate() {
                    let c1 = pattern[k1].1;
                    let wv1 = w * ev.jac[k1];
                    if wv1 == 0.0 {
                        continue;
                    }
                    for &k2 in &es[j1..] {
                        b[(pattern[k2].1, c1)] += wv1 * ev.jac[k2];
                    }
                }
            }
            for i in 0..n {
                for j in 0..i {
                    b[(j, i)] = b[(i, j)];
                }
            }
            // Increasing damping until the factorization holds and the step
            // actually decreases the augmented Lagrangian.
            let mut moved = None;
            for _ in 0..8 {
                let mut bb = b.clone();
                for i in 0..n {
                    bb[(i, i)] += delta * b[(i, i)].max(1.0);
                }
                let Some(chol) = bb.cholesky() else {
                    delta *= 10.0;
                    continue;
                };
                let d = chol.solve(&(-&grad));
                let slope = grad.dot(&d);
                if slope >= 0.0 {
                    delta *= 10.0;
                    continue;
                }
                let mut alpha = 1.0;
                for _ in 0..20 {
                    let mut y_try = &y + &d * alpha;
                    clamp_vars(&mut y_try);
                    if let Some(ev_try) = guard.note(problem.eval_all(&y_try, false))? {
                        let l_try = al_of(&ev_try, &mu, rho);
                        if l_try <= lval + 1e-4 * alpha * slope {
                            moved = Some(y_try);
                            break;
                        }
                    }
                    alpha *= 0.5;
                }
                if moved.is_some() {
                    break;
                }
                delta *= 10.0;
            }
            let Some(y_new) = moved else {
                break; // no acceptable step at any damping: inner model done
            };
            problem.note_accept(&y_new);
            let ev_new = match guard.note(problem.eval_all(&y_new, true))? {
                Some(e) => e,
                None => break,
            };
            // Powell-damped BFGS update of the Lagrangian-curvature estimate.
            let s = &y_new - &y;
            let mut yf = lag_grad(&ev_new, &mu) - lag_grad(&ev, &mu);
            let bs = &bf * &s;
            let sbs = s.dot(&bs);
            let sy = s.dot(&yf);
            if sbs > 0.0 {
                if sy < 0.2 * sbs {
                    let theta = 0.8 * sbs / (sbs - sy);
                    yf = yf * theta + &bs * (1.0 - theta);
                }
                let sy = s.dot(&yf);
                if sy > 1e-12 * s.norm() * yf.norm() {
                    bf -= &bs * (bs.transpose() / sbs);
                    bf += &yf * (yf.transpose() / sy);
                }
            }
            y = y_new;
            ev = ev_new;
            delta = (delta * 0.33).max(1e-10);
            let lnew = al_of(&ev, &mu, rho);
            // Negligible decrease several times in a row means further
            // iterations are wasted budget.
            if lval - lnew <= 1e-10 * (1.0 + lval.abs()) {
                stall += 1;
            } else {
                stall = 0;
            }
            lval = lnew;
            inner_total += 1;
            inner_used += 1;
            trace.push(TraceRow {
                wall_time: start.elapsed().as_secs_f64(),
                violation: violation_of(&ev.cons, &lo, &hi),
                cost: ev.cost,
            });
            if stall >= 3 {
                break 'inner;
            }
        }

        // ---- multiplier / penalty update -------------------------------
        let violation = violation_of(&ev.cons, &lo, &hi);
        let v = scons(&ev) + &mu / rho;
        mu = (&v - project(&v, &slo, &shi)) * rho;
        mu.apply(|x| *x = x.clamp(-1e7, 1e7));
        if opts.verbose {
            eprintln!(
                "outer {:3}  rho {:8.1e}  viol {:10.3e}  cost {:12.5e}  inner {:3}  |gL| {:8.1e}",
                outer + 1,
                rho,
                violation,
                ev.cost,
                inner_used,
                gl_exit
            );
        }
        if violation <= opts.violation_tol {
            converged = true;
            break 'outer;
        }
        // ---- feasibility polish ----------------------------------------
        // Near-feasible, the multiplier iteration can wander for many
        // rounds; plain Gauss–Newton on the constraint residuals alone
        // closes the last stretch quadratically. The cost moves negligibly
        // from a near-feasible point. Only fires once the multiplier
        // updates stop paying their way (violation no longer halving), so
        // the cost keeps improving while the outer loop still delivers.
        if violation <= 50.0 * opts.violation_tol && violation > 0.5 * prev_violation {
            let mut pdelta = 1e-8_f64;
            'polish: for _ in 0..12 {
                let ps = {
                    let s = scons(&ev);
                    &s - project(&s, &slo, &shi)
                };
                let mut g = DVector::<f64>::zeros(n);
                for (k, &(r, c)) in pattern.iter().enumerate() {
                    g[c] += ev.jac[k] / scale[r] * ps[r];
                }
                let phi = 0.5 * ps.norm_squared();
                let mut b = DMatrix::<f64>::zeros(n, n);
                for r in 0..m {
                    if ps[r] == 0.0 {
                        continue;
                    }
                    let w = 1.0 / (scale[r] * scale[r]);
                    let es = &row_entries[r];
                    for (j1, &k1) in es.iter().enumerate() {
                        let c1 = pattern[k1].1;
                        let wv1 = w * ev.jac[k1];
                        if wv1 == 0.0 {
                            continue;
                        }
                        for &k2 in &es[j1..] {
                            b[(pattern[k2].1, c1)] += wv1 * ev.jac[k2];
                        }
                    }
                }
                for i in 0..n {
                    for j in 0..i {
                        b[(j, i)] = b[(i, j)];
                    }
                }
                let mut moved = None;
                for _ in 0..8 {
                    let mut bb = b.clone();
                    for i in 0..n {
                        bb[(i, i)] += pdelta * b[(i, i)].max(1e-8);
                    }
                    let Some(chol) = bb.cholesky() else {
                        pdelta *= 100.0;
                        continue;
                    };
                    let d = chol.solve(&(-&g));
                    let slope = g.dot(&d);
                    if slope >= 0.0 {
                        pdelta *= 100.0;
                        continue;
                    }
                    let mut alpha = 1.0;
                    for _ in 0..15 {
                        let mut y_try = &y + &d * alpha;
                        clamp_vars(&mut y_try);
                        if let Some(ev_try) = guard.note(problem.eval_all(&y_try, false))? {
                            let s_try = scons(&ev_try);
                            let p_try = &s_try - project(&s_try, &slo, &shi);
                            if 0.5 * p_try.norm_squared() <= phi + 1e-4 * alpha * slope {
                                moved = Some(y_try);
                                break;
                            }
                        }
                        alpha *= 0.5;
                    }
                    if moved.is_some() {
                        break;
                    }
                    pdelta *= 100.0;
                }
                let Some(y_new) = moved else {
                    break 'polish;
                };
                problem.note_accept(&y_new);
                let ev_new = match guard.note(problem.eval_all(&y_new, true))? {
                    Some(e) => e,
                    None => break 'polish,
                };
                y = y_new;
                ev = ev_new;
                pdelta = (pdelta * 0.01).max(1e-10);
                inner_total += 1;
                trace.push(TraceRow {
                    wall_time: start.elapsed().as_secs_f64(),
                    violation: violation_of(&ev.cons, &lo, &hi),
                    cost: ev.cost,
                });
                if violation_of(&ev.cons, &lo, &hi) <= opts.violation_tol {
                    break 'polish;
                }
            }
            if violation_of(&ev.cons, &lo, &hi) <= opts.violation_tol {
                converged = true;
                if opts.verbose {
                    eprintln!(
                        "polish     viol {:10.3e}  cost {:12.5e}",
                        violation_of(&ev.cons, &lo, &hi),
                        ev.cost
                    );
                }
                break 'outer;
            }
        }
        if violation > 0.75 * prev_violation {
            rho = (rho * opts.rho_growth).min(opts.rho_max);
        }
        prev_violation = violation;
        inner_tol = (inner_tol * 0.5).max(1e-8);
    }

    // Multipliers of the scaled rows convert back to the problem's units:
    // μᵀ(g/s) = (μ/s)ᵀg.
    let mu_raw = DVector::from_fn(m, |r, _| mu[r] / scale[r]);
    // KKT stationarity of f + μᵀg at the returned point
    let mut stat_grad = ev.cost_grad.clone();
    for (k, &(r, c)) in pattern.iter().enumerate() {
        stat_grad[c] += ev.jac[k] * mu_raw[r];
    }
    Ok(SolveResult {
        violation: violation_of(&ev.cons, &lo, &hi),
        stationarity: if n > 0 { stat_grad.amax() } else { 0.0 },
        cost: ev.cost,
        y,
        multipliers: mu_raw,
        outer_iters: outer_done,
        inner_iters: inner_total,
        converged,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// min ½‖y − c‖² subject to box rows picked by each test.
    struct Quadratic {
        c: DVector<f64>,
        lo: DVector<f64>,
        hi: DVector<f64>,
    }

    impl NlpProblem for Quadratic {
        fn n_vars(&self) -> usize {
            self.c.len()
        }
        fn n_cons(&self) -> usize {
            self.lo.len()
        }
        fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
            (self.lo.clone(), self.hi.clone())
        }
        fn jacobian_pattern(&self) -> Vec<(usize, usize)> {
            (0..self.n_cons()).map(|i| (i, i)).collect()
        }
        fn eval_all(&self, y: &DVector<f64>, want_grad: bool) -> Result<Evaluation, String> {
            let d = y - &self.c;
            Ok(Evaluation {
                cost: 0.5 * d.norm_squared(),
                cost_grad: if want_grad { d } else { DVector::zeros(0) },
                cons: y.rows(0, self.n_cons()).into_owned(),
                jac: if want_grad {
                    vec![1.0; self.n_cons()]
                } else {
                    Vec::new()
                },
            })
        }
    }

    #[test]
    fn unconstrained_quadratic() {
        let p = Quadratic {
            c: DVector::from_vec(vec![1.0, -2.0, 0.5]),
            lo: DVector::zeros(0),
            hi: DVector::zeros(0),
        };
        let r = solve(&p, &SolveOptions::default()).unwrap();
        assert!(r.converged);
        assert!((r.y - &p.c).amax() < 1e-6);
        assert!(r.stationarity < 1e-6);
        assert!(!r.trace.is_empty());
    }

    #[test]
    fn box_rows_clip_the_solution() {
        // minimizer of ½‖y−c‖² with y0 ∈ [0, ∞), y1 ∈ [−1, 1]: clip c.
        let p = Quadratic {
            c: DVector::from_vec(vec![-3.0, 4.0]),
            lo: DVector::from_vec(vec![0.0, -1.0]),
            hi: DVector::from_vec(vec![f64::INFINITY, 1.0]),
        };
        let r = solve(&p, &SolveOptions::default()).unwrap();
        assert!(r.converged);
        assert!((r.y[0] - 0.0).abs() < 1e-4, "y0 = {}", r.y[0]);
        assert!((r.y[1] - 1.0).abs() < 1e-4, "y1 = {}", r.y[1]);
        // sign convention of f + μᵀg: active lower bound → μ < 0,
        // active upper bound → μ > 0.
        assert!(r.multipliers[0] < 0.0);
        assert!(r.multipliers[1] > 0.0);
    }

    struct CircleRosenbrock;

    impl NlpProblem for CircleRosenbrock {
        fn n_vars(&self) -> usize {
            2
        }
        fn n_cons(&self) -> usize {
            1
        }
        fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
            (DVector::from_vec(vec![1.0]), DVector::from_vec(vec![1.0]))
        }
        fn jacobian_pattern(&self) -> Vec<(usize, usize)> {
            vec![(0, 0), (0, 1)]
        }
        fn eval_all(&self, y: &DVector<f64>, want_grad: bool) -> Result<Evaluation, String> {
            let (a, b) = (y[0], y[1]);
            let cost = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let cons = DVector::from_vec(vec![a * a + b * b]);
            let mut ev = Evaluation {
                cost,
                cons,
                ..Default::default()
            };
            if want_grad {
                ev.cost_grad = DVector::from_vec(vec![
                    -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                    200.0 * (b - a * a),
                ]);
                ev.jac = vec![2.0 * a, 2.0 * b];
            }
            Ok(ev)
        }
    }

    #[test]
    fn rosenbrock_on_the_unit_circle() {
        let opts = SolveOptions {
            violation_tol: 1e-8,
            max_inner: 200,
            ..Default::default()
        };
        let r = solve(&CircleRosenbrock, &opts).unwrap();
        assert!(r.converged, "violation {}", r.violation);
        assert!(r.violation < 1e-8);
        // the known constrained minimizer sits near (0.7864, 0.6177)
        assert!((r.y[0] - 0.7864).abs() < 1e-3, "y = {}", r.y);
        assert!((r.y[1] - 0.6177).abs() < 1e-3, "y = {}", r.y);
        assert!(r.stationarity < 1e-3, "stationarity {}", r.stationarity);
    }

    #[test]
    fn trace_is_recorded_from_first_evaluation() {
        let p = Quadratic {
            c: DVector::from_vec(vec![2.0, 2.0]),
            lo: DVector::from_vec(vec![0.0, 0.0]),
            hi: DVector::from_vec(vec![1.0, 1.0]),
        };
        let r = solve(&p, &SolveOptions::default()).unwrap();
        assert!(r.trace.len() >= 2);
        // first row is the evaluation at the initial point (origin)
        assert_eq!(r.trace[0].cost, 4.0);
        assert_eq!(r.trace[0].violation, 0.0);
        for w in r.trace.windows(2) {
            assert!(w[1].wall_time >= w[0].wall_time);
        }
        // running minimum of the cost column never increases
        let mut best = f64::INFINITY;
        let mins: Vec<f64> = r
            .trace
            .iter()
            .map(|t| {
                best = best.min(t.cost);
                best
            })
            .collect();
        for w in mins.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    struct AlwaysFails;

    impl NlpProblem for AlwaysFails {
        fn n_vars(&self) -> usize {
            1
        }
        fn n_cons(&self) -> usize {
            0
        }
        fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
            (DVector::zeros(0), DVector::zeros(0))
        }
        fn jacobian_pattern(&self) -> Vec<(usize, usize)> {
            Vec::new()
        }
        fn eval_all(&self, _: &DVector<f64>, _: bool) -> Result<Evaluation, String> {
            Err("synthetic failure".into())
        }
    }

    #[test]
    fn repeated_eval_failures_abort() {
        let err = solve(&AlwaysFails, &SolveOptions::default()).unwrap_err();
        match err {
            SolverError::EvalFailure { .. } => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn external_backend_dispatch() {
        register_external_solver(
            "mock",
            BackendCaps {
                supports_sparse_jacobian: true,
            },
            |p, _| {
                Ok(SolveResult {
                    y: DVector::zeros(p.n_vars()),
                    cost: 42.0,
                    violation: 0.0,
                    stationarity: 0.0,
                    multipliers: DVector::zeros(p.n_cons()),
                    outer_iters: 0,
                    inner_iters: 0,
                    converged: true,
                    trace: Vec::new(),
                })
            },
        );
        let p = Quadratic {
            c: DVector::from_vec(vec![1.0]),
            lo: DVector::zeros(0),
            hi: DVector::zeros(0),
        };
        let opts = SolveOptions {
            backend: Some("mock".into()),
            ..Default::default()
        };
        let r = solve(&p, &opts).unwrap();
        assert_eq!(r.cost, 42.0);
        assert!(backend_caps("mock").unwrap().supports_sparse_jacobian);
        let missing = SolveOptions {
            backend: Some("nope".into()),
            ..Default::default()
        };
        assert!(matches!(
            solve(&p, &missing),
            Err(SolverError::UnknownBackend(_))
        ));
    }
}
