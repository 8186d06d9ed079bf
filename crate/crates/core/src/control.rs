//! Adjoint gradients, the duality harness and the optimality-system solvers.
//!
//! The discrete gradient pairs controls with the step adjoint
//! `w_m = phi_1(A dt) E[zeta_{m+1} | F_m]`, the average of the adjoint over
//! `[t_m, t_{m+1})` that the exponential integrator actually sees:
//! `grad_u = kappa1 u + B^T w`, `grad_v = kappa2 v + K^T A^{1-alpha} w` with
//! `K = A^alpha D`.

use std::sync::Arc;

use ndarray::{Array2, Array3, Axis};

use crate::adjoint::{
    realized_step_adjoint_mean, solve_affine, solve_regression, AdjointPair, AffineScheme,
    RegressionOptions, RegressionTarget,
};
use crate::error::{Error, Result};
use crate::forward::{
    evaluate_cost, simulate_state, simulate_z1, simulate_z2, ControlPath, Problem, StepOperator,
    TrajectoryEnsemble,
};
use crate::noise::{EnsembleSpec, NoiseEnsemble};
use crate::util::ordered_mean;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjointMethod {
    Regression(RegressionOptions),
    Affine(AffineScheme),
}

impl Default for AdjointMethod {
    fn default() -> Self {
        AdjointMethod::Regression(RegressionOptions::default())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientPair {
    pub grad_u: ControlPath,
    pub grad_v: ControlPath,
    pub alpha: f64,
}

/// State, adjoint, cost and gradient at one control pair.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub state: TrajectoryEnsemble,
    /// Absent when only the gradient was requested and it could be formed
    /// from path means alone.
    pub adjoint: Option<AdjointPair>,
    pub cost: f64,
    pub gradient: GradientPair,
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 0.25) {
        return Err(Error::config("alpha", format!("must lie in (0, 1/4), got {alpha}")));
    }
    Ok(())
}

/// `K^T A^{1-alpha}` as an `N_b x N` matrix.
pub fn boundary_adjoint_map(problem: &Problem, alpha: f64) -> Array2<f64> {
    let k = problem.space.weighted_lift(alpha);
    let mut m = k.t().to_owned();
    for (mut col, &l) in m.columns_mut().into_iter().zip(problem.space.eigenvalues().iter()) {
        col *= l.powf(1.0 - alpha);
    }
    m
}

fn adjoint_for(
    problem: &Problem,
    state: &TrajectoryEnsemble,
    u: &ControlPath,
    v: &ControlPath,
    method: &AdjointMethod,
    pathwise: bool,
) -> Result<AdjointPair> {
    match method {
        AdjointMethod::Regression(opts) => {
            let mut o = *opts;
            o.keep_pathwise |= pathwise;
            solve_regression(problem, state, &o)
        }
        AdjointMethod::Affine(scheme) => {
            solve_affine(problem, u, v, *scheme, None)?.evaluate(state, pathwise)
        }
    }
}

fn gradient_from(
    problem: &Problem,
    mean: &Array2<f64>,
    adjoint: Option<&AdjointPair>,
    u: &ControlPath,
    v: &ControlPath,
    alpha: f64,
) -> GradientPair {
    let bt = problem.control_op.t().to_owned();
    let kt = boundary_adjoint_map(problem, alpha);
    let (k1, k2) = (problem.cost.kappa1, problem.cost.kappa2);
    let det = u.is_deterministic() && v.is_deterministic();
    if det {
        let w = mean;
        let gu = w.dot(&bt.t());
        let gv = w.dot(&kt.t());
        let (ControlPath::Deterministic(ua), ControlPath::Deterministic(va)) = (u, v) else {
            unreachable!()
        };
        GradientPair {
            grad_u: ControlPath::Deterministic(gu + &(ua * k1)),
            grad_v: ControlPath::Deterministic(gv + &(va * k2)),
            alpha,
        }
    } else {
        let adjoint = adjoint.expect("pathwise gradients need adjoint samples");
        let m = adjoint.n_paths();
        let steps = problem.grid.n_steps;
        let mut gu = Array3::zeros((m, steps, u.dim()));
        let mut gv = Array3::zeros((m, steps, v.dim()));
        for p in 0..m {
            for s in 0..steps {
                let w = adjoint.step_adjoint_at(p, s);
                gu.slice_mut(ndarray::s![p, s, ..])
                    .assign(&(bt.dot(&w) + &(&u.at(p, s) * k1)));
                gv.slice_mut(ndarray::s![p, s, ..])
                    .assign(&(kt.dot(&w) + &(&v.at(p, s) * k2)));
            }
        }
        GradientPair {
            grad_u: ControlPath::Pathwise(gu),
            grad_v: ControlPath::Pathwise(gv),
            alpha,
        }
    }
}

pub fn evaluate(
    problem: &Problem,
    u: &ControlPath,
    v: &ControlPath,
    alpha: f64,
    noise: &Arc<NoiseEnsemble>,
    method: &AdjointMethod,
) -> Result<Evaluation> {
    evaluate_with(problem, u, v, alpha, noise, method, true)
}

fn evaluate_with(
    problem: &Problem,
    u: &ControlPath,
    v: &ControlPath,
    alpha: f64,
    noise: &Arc<NoiseEnsemble>,
    method: &AdjointMethod,
    keep_adjoint: bool,
) -> Result<Evaluation> {
    check_alpha(alpha)?;
    let state = simulate_state(problem, u, v, noise)?;
    let cost = evaluate_cost(problem, &state, u, v)?;
    let pathwise = !(u.is_deterministic() && v.is_deterministic());
    let means_suffice = matches!(
        method,
        AdjointMethod::Regression(o) if o.target == RegressionTarget::Realized
    ) && !pathwise;
    let (mean, adjoint) = if means_suffice && !keep_adjoint {
        let op = StepOperator::new(problem, None)?;
        (realized_step_adjoint_mean(problem, &op, &state)?, None)
    } else {
        let a = adjoint_for(problem, &state, u, v, method, pathwise)?;
        (a.step_adjoint_mean.clone(), Some(a))
    };
    let gradient = gradient_from(problem, &mean, adjoint.as_ref(), u, v, alpha);
    Ok(Evaluation {
        state,
        adjoint,
        cost,
        gradient,
    })
}

/// Gradient of the sample-average cost at `(u, v)`.
pub fn compute_gradient(
    problem: &Problem,
    u: &ControlPath,
    v: &ControlPath,
    alpha: f64,
    noise: &Arc<NoiseEnsemble>,
    method: &AdjointMethod,
) -> Result<GradientPair> {
    Ok(evaluate_with(problem, u, v, alpha, noise, method, false)?.gradient)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualityReport {
    /// `E int <y - y_d, z1(u_tilde)>`
    pub lhs1: f64,
    /// `E int <z*, B u_tilde>`
    pub rhs1: f64,
    /// `E int <y - y_d, z2(v_tilde)>`
    pub lhs2: f64,
    /// `E int <A^{1-alpha} z*, A^alpha D v_tilde>`
    pub rhs2: f64,
    pub gap1: f64,
    pub gap2: f64,
}

pub fn relative_gap(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn tracking_pairing(problem: &Problem, y: &TrajectoryEnsemble, z: &TrajectoryEnsemble) -> f64 {
    let dt = problem.grid.dt();
    let yd = &problem.cost.y_d;
    ordered_mean(y.n_paths(), |p| {
        let a = y.states.index_axis(Axis(0), p);
        let b = z.states.index_axis(Axis(0), p);
        let mut s = 0.0;
        for m in 0..problem.grid.n_steps {
            for k in 0..problem.n_modes() {
                s += (a[[m, k]] - yd[[m, k]]) * b[[m, k]];
            }
        }
        dt * s
    })
}

fn adjoint_pairing(
    adjoint: &AdjointPair,
    map: &Array2<f64>,
    dir: &ControlPath,
    dt: f64,
) -> f64 {
    let steps = adjoint.grid.n_steps;
    match dir {
        ControlPath::Deterministic(d) => {
            let g = adjoint.step_adjoint_mean.dot(map);
            dt * (&g * d).sum()
        }
        ControlPath::Pathwise(_) => ordered_mean(adjoint.n_paths(), |p| {
            let mut s = 0.0;
            for m in 0..steps {
                s += adjoint.step_adjoint_at(p, m).dot(&map.dot(&dir.at(p, m)));
            }
            dt * s
        }),
    }
}

/// Both duality identities on one noise ensemble.
#[allow(clippy::too_many_arguments)]
pub fn duality_check(
    problem: &Problem,
    u: &ControlPath,
    v: &ControlPath,
    u_tilde: &ControlPath,
    v_tilde: &ControlPath,
    alpha: f64,
    noise: &Arc<NoiseEnsemble>,
    method: &AdjointMethod,
) -> Result<DualityReport> {
    check_alpha(alpha)?;
    let dt = problem.grid.dt();
    let y = simulate_state(problem, u, v, noise)?;
    let z1 = simulate_z1(problem, u_tilde, noise)?;
    let z2 = simulate_z2(problem, v_tilde, noise)?;
    let pathwise = !(u_tilde.is_deterministic() && v_tilde.is_deterministic());
    let adjoint = adjoint_for(problem, &y, u, v, method, pathwise)?;
    let lhs1 = tracking_pairing(problem, &y, &z1);
    let lhs2 = tracking_pairing(problem, &y, &z2);
    let rhs1 = adjoint_pairing(&adjoint, &problem.control_op, u_tilde, dt);
    // <A^{1-alpha} w, A^alpha D v> with the two powers kept separate.
    let sp = &problem.space;
    let k = sp.weighted_lift(alpha);
    let mut map = k.clone();
    for (mut row, &l) in map.rows_mut().into_iter().zip(sp.eigenvalues().iter()) {
        row *= l.powf(1.0 - alpha);
    }
    let rhs2 = adjoint_pairing(&adjoint, &map, v_tilde, dt);
    Ok(DualityReport {
        lhs1,
        rhs1,
        lhs2,
        rhs2,
        gap1: relative_gap(lhs1, rhs1),
        gap2: relative_gap(lhs2, rhs2),
    })
}

/// Where each iteration draws its noise.
#[derive(Debug, Clone)]
pub enum NoiseStrategy {
    /// One ensemble for the whole run (sample-average approximation).
    Frozen(Arc<NoiseEnsemble>),
    /// Fresh paths at every iteration with seeds `seed + iteration`.
    Resample(EnsembleSpec),
}

impl NoiseStrategy {
    fn at(&self, problem: &Problem, iteration: usize) -> Result<Arc<NoiseEnsemble>> {
        match self {
            NoiseStrategy::Frozen(n) => Ok(Arc::clone(n)),
            NoiseStrategy::Resample(spec) => {
                let s = EnsembleSpec {
                    seed: spec.seed.wrapping_add(iteration as u64),
                    ..*spec
                };
                Ok(Arc::new(NoiseEnsemble::sample(
                    &problem.noise,
                    problem.grid.n_steps,
                    problem.grid.dt(),
                    &s,
                )?))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerOptions {
    pub max_iter: usize,
    pub tol: f64,
    /// Picard damping `theta` in `(0, 1]`.
    pub damping: f64,
    /// First trial step of the line search.
    pub initial_step: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
    pub method: AdjointMethod,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-6,
            damping: 0.5,
            initial_step: 1.0,
            armijo: 1e-4,
            max_backtracks: 40,
            method: AdjointMethod::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizationReport {
    /// Cost at every iterate, starting with the initial controls.
    pub costs: Vec<f64>,
    /// Scaled fixed-point residual at every iterate.
    pub residuals: Vec<f64>,
    pub residuals_u: Vec<f64>,
    pub residuals_v: Vec<f64>,
    pub final_u: ControlPath,
    pub final_v: ControlPath,
    pub converged: bool,
    /// Number of control updates performed.
    pub iterations: usize,
    pub line_search_failed: bool,
}

impl OptimizationReport {
    pub fn final_cost(&self) -> f64 {
        *self.costs.last().expect("at least one iterate")
    }

    pub fn final_residual(&self) -> f64 {
        *self.residuals.last().expect("at least one iterate")
    }
}

/// `(||g_u||, ||g_v||, max(||g_u||, ||g_v||) / (1 + ||u|| + ||v||))`.
pub fn scaled_residual(g: &GradientPair, u: &ControlPath, v: &ControlPath, dt: f64) -> (f64, f64, f64) {
    let ru = g.grad_u.norm(dt);
    let rv = g.grad_v.norm(dt);
    (ru, rv, ru.max(rv) / (1.0 + u.norm(dt) + v.norm(dt)))
}

fn new_report(u: ControlPath, v: ControlPath) -> OptimizationReport {
    OptimizationReport {
        costs: Vec::new(),
        residuals: Vec::new(),
        residuals_u: Vec::new(),
        residuals_v: Vec::new(),
        final_u: u,
        final_v: v,
        converged: false,
        iterations: 0,
        line_search_failed: false,
    }
}

fn record(rep: &mut OptimizationReport, ev: &Evaluation, u: &ControlPath, v: &ControlPath, dt: f64) -> f64 {
    let (ru, rv, r) = scaled_residual(&ev.gradient, u, v, dt);
    rep.costs.push(ev.cost);
    rep.residuals.push(r);
    rep.residuals_u.push(ru);
    rep.residuals_v.push(rv);
    r
}

/// Damped fixed-point iteration on `u = -B^T z*/kappa1`, `v = -K^T A^{1-alpha} z*/kappa2`.
#[allow(clippy::too_many_arguments)]
pub fn optimize_picard(
    problem: &Problem,
    u0: &ControlPath,
    v0: &ControlPath,
    alpha: f64,
    noise: &NoiseStrategy,
    opts: &OptimizerOptions,
) -> Result<OptimizationReport> {
    check_alpha(alpha)?;
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::config("solver.damping", "must lie in (0, 1]"));
    }
    let dt = problem.grid.dt();
    let (k1, k2) = (problem.cost.kappa1, problem.cost.kappa2);
    let mut u = u0.clone();
    let mut v = v0.clone();
    let mut rep = new_report(u.clone(), v.clone());
    for it in 0..=opts.max_iter {
        let ev = evaluate_with(problem, &u, &v, alpha, &noise.at(problem, it)?, &opts.method, false)?;
        let r = record(&mut rep, &ev, &u, &v, dt);
        if r <= opts.tol {
            rep.converged = true;
            break;
        }
        if it == opts.max_iter || !r.is_finite() {
            break;
        }
        u = u.axpy(-opts.damping / k1, &ev.gradient.grad_u)?;
        v = v.axpy(-opts.damping / k2, &ev.gradient.grad_v)?;
        rep.iterations += 1;
    }
    rep.final_u = u;
    rep.final_v = v;
    Ok(rep)
}

/// Steepest descent with Armijo backtracking on the sample-average cost.
pub fn optimize_gradient_descent(
    problem: &Problem,
    u0: &ControlPath,
    v0: &ControlPath,
    alpha: f64,
    noise: &NoiseStrategy,
    opts: &OptimizerOptions,
) -> Result<OptimizationReport> {
    check_alpha(alpha)?;
    let dt = problem.grid.dt();
    let mut u = u0.clone();
    let mut v = v0.clone();
    let mut rep = new_report(u.clone(), v.clone());
    for it in 0..=opts.max_iter {
        let ens = noise.at(problem, it)?;
        let ev = evaluate_with(problem, &u, &v, alpha, &ens, &opts.method, false)?;
        let r = record(&mut rep, &ev, &u, &v, dt);
        if r <= opts.tol {
            rep.converged = true;
            break;
        }
        if it == opts.max_iter || !r.is_finite() {
            break;
        }
        let g = &ev.gradient;
        let gnorm2 = g.grad_u.inner(&g.grad_u, dt) + g.grad_v.inner(&g.grad_v, dt);
        let mut step = opts.initial_step;
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let ut = u.axpy(-step, &g.grad_u)?;
            let vt = v.axpy(-step, &g.grad_v)?;
            let y = simulate_state(problem, &ut, &vt, &ens)?;
            let j = evaluate_cost(problem, &y, &ut, &vt)?;
            if j <= ev.cost - opts.armijo * step * gnorm2 {
                accepted = Some((ut, vt));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((ut, vt)) => {
                u = ut;
                v = vt;
                rep.iterations += 1;
            }
            None => {
                rep.line_search_failed = true;
                break;
            }
        }
    }
    rep.final_u = u;
    rep.final_v = v;
    Ok(rep)
}
