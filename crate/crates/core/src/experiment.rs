//! Command orchestration: each command builds the problem from a validated
//! configuration, runs on the seeded ensemble and writes its outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::adjoint::{solve_affine, solve_regression, AdjointPair, AffineScheme, RegressionOptions};
use crate::config::ExperimentConfig;
use crate::control::{
    compute_gradient, duality_check, optimize_gradient_descent, optimize_picard, AdjointMethod,
    NoiseStrategy, OptimizationReport, OptimizerOptions,
};
use crate::error::{Error, Result};
use crate::forward::{evaluate_cost, simulate_state, simulate_z1, simulate_z2, ControlPath, Problem, TrajectoryEnsemble};
use crate::io::{write_array, write_json, Csv, Provenance};
use crate::noise::{EnsembleSpec, NoiseEnsemble, NormalStream};
use crate::regularized::{ito_product_residuals, run_sweep, simulate_regularized_forward, ForwardInput, RegularizationSweep};
use crate::util::ordered_mean;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    Duality,
    Gradient,
    Linearity,
    ResolventSweep,
    BackwardCompare,
    ItoProduct,
}

impl Check {
    pub const ALL: [Check; 6] = [
        Check::Duality,
        Check::Gradient,
        Check::Linearity,
        Check::ResolventSweep,
        Check::BackwardCompare,
        Check::ItoProduct,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::Duality => "duality",
            Check::Gradient => "gradient",
            Check::Linearity => "linearity",
            Check::ResolventSweep => "resolvent-sweep",
            Check::BackwardCompare => "backward-compare",
            Check::ItoProduct => "ito-product",
        }
    }
}

impl FromStr for Check {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Check::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Unsupported(format!("unknown check `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Picard,
    GradientDescent,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Picard => "picard",
            Method::GradientDescent => "gd",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "picard" => Ok(Method::Picard),
            "gd" => Ok(Method::GradientDescent),
            _ => Err(Error::Unsupported(format!("unknown method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub check: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub details: BTreeMap<String, f64>,
    pub config_hash: String,
    pub tool: String,
    pub version: String,
}

/// Problem and provenance shared by all commands.
pub struct Setup {
    pub config: ExperimentConfig,
    pub problem: Problem,
    pub prov: Provenance,
}

/// Paths per batch for checks that only need per-path statistics.
const BATCH: usize = 2048;

impl Setup {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let problem = config.problem()?;
        Ok(Self {
            config: config.clone(),
            prov: Provenance {
                config_hash: config.hash(),
                seed: config.ensemble.seed,
            },
            problem,
        })
    }

    fn spec(&self) -> EnsembleSpec {
        EnsembleSpec::new(self.config.ensemble.n_paths, self.config.ensemble.seed)
    }

    /// The full frozen ensemble.
    pub fn noise(&self) -> Result<Arc<NoiseEnsemble>> {
        self.noise_range(0..self.config.ensemble.n_paths)
    }

    fn noise_range(&self, range: std::ops::Range<usize>) -> Result<Arc<NoiseEnsemble>> {
        let pr = &self.problem;
        Ok(Arc::new(NoiseEnsemble::sample_range(
            &pr.noise,
            pr.grid.n_steps,
            pr.grid.dt(),
            &self.spec(),
            range,
        )?))
    }

    fn method(&self) -> AdjointMethod {
        AdjointMethod::Regression(self.config.regression_options())
    }
}

/// Deterministic standard-normal control pair drawn from stream `index`.
pub fn probe_directions(problem: &Problem, seed: u64, index: u64) -> (ControlPath, ControlPath) {
    let steps = problem.grid.n_steps;
    let mut s = NormalStream::new(seed, index);
    let u = Array2::from_shape_simple_fn((steps, problem.n_modes()), || s.next_normal());
    let v = Array2::from_shape_simple_fn((steps, problem.space.boundary_dim()), || s.next_normal());
    (ControlPath::Deterministic(u), ControlPath::Deterministic(v))
}

/// Base point used by the checks: half a probe draw from a reserved stream.
pub fn base_controls(problem: &Problem, seed: u64) -> (ControlPath, ControlPath) {
    let (u, v) = probe_directions(problem, seed, 1 << 20);
    (u.scale(0.5), v.scale(0.5))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

pub struct SimulateSummary {
    pub mean: Array2<f64>,
    pub variance: Array2<f64>,
}

/// Uncontrolled ensemble, its per-mode statistics and optionally the adjoint.
pub fn simulate(config: &ExperimentConfig, out: &Path) -> Result<SimulateSummary> {
    let st = Setup::new(config)?;
    ensure_dir(out)?;
    let pr = &st.problem;
    let traj = simulate_state(pr, &pr.zero_u(), &pr.zero_v(), &st.noise()?)?;
    write_array(
        out,
        "states",
        &traj.states.clone().into_dyn(),
        &["path", "step", "mode"],
        &pr.grid,
        &st.prov,
    )?;
    let mean = traj.mean();
    let var = traj.variance();
    let m = traj.n_paths() as f64;
    let mut csv = Csv::new(&["step", "mode", "t", "mean", "variance", "stderr"], &st.prov);
    for step in 0..=pr.grid.n_steps {
        for k in 0..pr.n_modes() {
            let v = var[[step, k]];
            csv.row(&[step, k], &[pr.grid.time(step), mean[[step, k]], v, (v / m).sqrt()]);
        }
    }
    csv.write(&out.join("summary.csv"))?;
    if config.output.write_adjoint {
        let pair = solve_regression(pr, &traj, &config.regression_options())?;
        write_adjoint(out, &pair, &st)?;
    }
    Ok(SimulateSummary { mean, variance: var })
}

fn write_adjoint(out: &Path, pair: &AdjointPair, st: &Setup) -> Result<()> {
    let g = &st.problem.grid;
    write_array(out, "adjoint_zstar", &pair.zstar.clone().into_dyn(), &["path", "step", "mode"], g, &st.prov)?;
    write_array(out, "adjoint_loading", &pair.loading.clone().into_dyn(), &["path", "step", "mode"], g, &st.prov)
}

/// Runs one check and writes `verify_<check>.json`.
pub fn verify(config: &ExperimentConfig, check: Check, out: &Path) -> Result<Verdict> {
    let st = Setup::new(config)?;
    ensure_dir(out)?;
    let mut details = BTreeMap::new();
    let (value, tolerance, pass) = match check {
        Check::Duality => check_duality(&st, &mut details)?,
        Check::Gradient => check_gradient(&st, &mut details)?,
        Check::Linearity => check_linearity(&st, &mut details)?,
        Check::ResolventSweep => check_sweep(&st, out, &mut details)?,
        Check::BackwardCompare => check_backward(&st, &mut details)?,
        Check::ItoProduct => check_ito(&st, &mut details)?,
    };
    let verdict = Verdict {
        check: check.name().into(),
        value,
        tolerance,
        pass,
        details,
        config_hash: st.prov.config_hash.clone(),
        tool: crate::io::TOOL.into(),
        version: crate::io::VERSION.into(),
    };
    write_json(&out.join(format!("verify_{}.json", check.name())), &verdict)?;
    Ok(verdict)
}

type CheckOutcome = (f64, f64, bool);

fn check_duality(st: &Setup, d: &mut BTreeMap<String, f64>) -> Result<CheckOutcome> {
    let pr = &st.problem;
    let seed = st.config.verify.direction_seed;
    let (u, v) = base_controls(pr, seed);
    let (ut, vt) = probe_directions(pr, seed, 0);
    let rep = duality_check(pr, &u, &v, &ut, &vt, st.config.alpha, &st.noise()?, &st.method())?;
    d.insert("lhs1".into(), rep.lhs1);
    d.insert("rhs1".into(), rep.rhs1);
    d.insert("lhs2".into(), rep.lhs2);
    d.insert("rhs2".into(), rep.rhs2);
    d.insert("gap1".into(), rep.gap1);
    d.insert("gap2".into(), rep.gap2);
    let value = rep.gap1.max(rep.gap2);
    let tol = st.config.verify.duality_tol;
    Ok((value, tol, value <= tol))
}

fn cost_at(st: &Setup, noise: &Arc<NoiseEnsemble>, u: &ControlPath, v: &ControlPath) -> Result<f64> {
    let y = simulate_state(&st.problem, u, v, noise)?;
    evaluate_cost(&st.problem, &y, u, v)
}

fn check_gradient(st: &Setup, d: &mut BTreeMap<String, f64>) -> Result<CheckOutcome> {
    let pr = &st.problem;
    let vs = &st.config.verify;
    let dt = pr.grid.dt();
    let (u, v) = base_controls(pr, vs.direction_seed);
    let noise = st.noise()?;
    let g = compute_gradient(pr, &u, &v, st.config.alpha, &noise, &st.method())?;
    let h = vs.fd_step;
    let mut worst = 0.0f64;
    for i in 0..vs.n_directions {
        let (du, dv) = probe_directions(pr, vs.direction_seed, i as u64);
        let plus = cost_at(st, &noise, &u.axpy(h, &du)?, &v.axpy(h, &dv)?)?;
        let minus = cost_at(st, &noise, &u.axpy(-h, &du)?, &v.axpy(-h, &dv)?)?;
        let fd = (plus - minus) / (2.0 * h);
        let ad = g.grad_u.inner(&du, dt) + g.grad_v.inner(&dv, dt);
        let err = crate::control::relative_gap(fd, ad);
        d.insert(format!("fd_{i}"), fd);
        d.insert(format!("adjoint_{i}"), ad);
        worst = worst.max(err);
    }
    let tol = vs
        .gradient_tol
        .unwrap_or(if pr.noise.is_deterministic() { 1e-6 } else { 1e-3 });
    Ok((worst, tol, worst <= tol))
}

fn max_abs_diff(a: &Array3<f64>, b: &Array3<f64>, c: &Array3<f64>) -> (f64, f64) {
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for ((x, y), z) in a.iter().zip(b.iter()).zip(c.iter()) {
        diff = diff.max((x - y - z).abs());
        scale = scale.max(z.abs());
    }
    (diff, scale)
}

fn check_linearity(st: &Setup, d: &mut BTreeMap<String, f64>) -> Result<CheckOutcome> {
    let pr = &st.problem;
    let seed = st.config.verify.direction_seed;
    let (u, v) = base_controls(pr, seed);
    let (ut, vt) = probe_directions(pr, seed, 0);
    let noise = st.noise()?;
    let y = simulate_state(pr, &u, &v, &noise)?;
    let yu = simulate_state(pr, &u.axpy(1.0, &ut)?, &v, &noise)?;
    let yv = simulate_state(pr, &u, &v.axpy(1.0, &vt)?, &noise)?;
    let z1 = simulate_z1(pr, &ut, &noise)?;
    let z2 = simulate_z2(pr, &vt, &noise)?;
    let (d1, s1) = max_abs_diff(&yu.states, &y.states, &z1.states);
    let (d2, s2) = max_abs_diff(&yv.states, &y.states, &z2.states);
    let r1 = d1 / s1.max(f64::MIN_POSITIVE);
    let r2 = d2 / s2.max(f64::MIN_POSITIVE);
    d.insert("relative_u".into(), r1);
    d.insert("relative_v".into(), r2);
    let value = r1.max(r2);
    let tol = st.config.verify.linearity_tol;
    Ok((value, tol, value <= tol))
}

/// Largest successive ratio over the four gap curves; below one iff every
/// curve strictly decreases.
pub fn sweep_decrease_ratio(s: &RegularizationSweep) -> f64 {
    [
        &s.errors_forward_u,
        &s.errors_forward_v,
        &s.errors_backward_z,
        &s.errors_backward_phi,
    ]
    .iter()
    .flat_map(|c| c.windows(2).map(|w| if w[0] > 0.0 { w[1] / w[0] } else { f64::INFINITY }))
    .fold(0.0, f64::max)
}

fn sweep_inner(st: &Setup) -> Result<RegularizationSweep> {
    let pr = &st.problem;
    let seed = st.config.verify.direction_seed;
    let (u, v) = base_controls(pr, seed);
    let (ut, vt) = probe_directions(pr, seed, 0);
    run_sweep(pr, &u, &v, &ut, &vt, &st.config.sweep.lambdas, &st.noise()?, &st.config.regression_options())
}

fn write_sweep_csv(s: &RegularizationSweep, prov: &Provenance, path: &Path) -> Result<()> {
    let mut csv = Csv::new(&["lambda", "gap_fwd_u", "gap_fwd_v", "gap_bwd_z", "gap_bwd_phi"], prov);
    for i in 0..s.lambdas.len() {
        csv.row(
            &[],
            &[
                s.lambdas[i],
                s.errors_forward_u[i],
                s.errors_forward_v[i],
                s.errors_backward_z[i],
                s.errors_backward_phi[i],
            ],
        );
    }
    csv.write(path)
}

fn check_sweep(st: &Setup, out: &Path, d: &mut BTreeMap<String, f64>) -> Result<CheckOutcome> {
    let s = sweep_inner(st)?;
    write_sweep_csv(&s, &st.prov, &out.join("verify_resolvent_sweep.csv"))?;
    let value = sweep_decrease_ratio(&s);
    for (i, l) in s.lambdas.iter().enumerate() {
        d.insert(format!("gap_fwd_u@{l:e}"), s.errors_forward_u[i]);
        d.insert(format!("gap_fwd_v@{l:e}"), s.errors_forward_v[i]);
        d.insert(format!("gap_bwd_z@{l:e}"), s.errors_backward_z[i]);
        d.insert(format!("gap_bwd_phi@{l:e}"), s.errors_backward_phi[i]);
    }
    Ok((value, 1.0, value < 1.0))
}

/// `sup_m (E||a_m - b_m||^2)^{1/2} / (E||b_m||^2)^{1/2}` over the steps where
/// the reference `b` is nonzero.
pub fn sup_relative_gap(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    let (paths, steps, _) = b.dim();
    let mut sup = 0.0f64;
    for m in 0..steps {
        let (num, den) = (0..paths).fold((0.0, 0.0), |(n, d), p| {
            let x = a.index_axis(Axis(0), p);
            let y = b.index_axis(Axis(0), p);
            let rn: f64 = x.row(m).iter().zip(y.row(m).iter()).map(|(u, v)| (u - v) * (u - v)).sum();
            let rd: f64 = y.row(m).iter().map(|v| v * v).sum();
            (n + rn, d + rd)
        });
        if den > 0.0 {
            sup = sup.max((num / den).sqrt());
        }
    }
    sup
}

fn check_backward(st: &Setup, d: &mut BTreeMap<String, f64>) -> Result<CheckOutcome> {
    let pr = &st.problem;
    let vs = &st.config.verify;
    // The continuous oracle resolves the input inside each step, so rough
    // controls would measure time discretization rather than the regression.
    let (u, v) = (pr.zero_u(), pr.zero_v());
    let y = simulate_state(pr, &u, &v, &st.noise()?)?;
    let opts = RegressionOptions {
        target: vs.backward_target.into(),
        ..st.config.regression_options()
    };
    let reg = solve_regression(pr, &y, &opts)?;
    let deterministic = pr.noise.is_deterministic();
    // Noiseless runs compare against the recursion on the same grid, which
    // the regression must reproduce exactly.
    let (scheme, tol) = if deterministic {
        (AffineScheme::GridConsistent, 1e-8)
    } else {
        (AffineScheme::ContinuousRk4 { substeps: vs.rk4_substeps }, vs.backward_tol)
    };
    let oracle = solve_affine(pr, &u, &v, scheme, None)?.evaluate(&y, false)?;
    let value = sup_relative_gap(&reg.zstar, &oracle.zstar);
    d.insert("zstar_gap".into(), value);
    Ok((value, tol, value <= tol))
}

/// `||sum_m G(y_m) dW_m||^2 - sum_m dt ||G(y_m)||^2_HS` per path.
pub fn isometry_residuals(problem: &Problem, state: &TrajectoryEnsemble) -> Vec<f64> {
    let n = problem.n_modes();
    let s = problem.noise.effective_variance();
    let dt = problem.grid.dt();
    (0..state.n_paths())
        .map(|p| {
            let y = state.states.index_axis(Axis(0), p);
            let dw = state.noise.increments.index_axis(Axis(0), p);
            let mut xi = vec![0.0; n];
            let mut sum = vec![0.0; n];
            let mut qv = 0.0;
            for m in 0..problem.grid.n_steps {
                problem.noise.effective_increment(dw.row(m), &mut xi);
                for k in 0..n {
                    sum[k] += y[[m, k]] * xi[k];
                    qv += dt * s[k] * y[[m, k]] * y[[m, k]];
                }
            }
            sum.iter().map(|x| x * x).sum::<f64>() - qv
        })
        .collect()
}

/// `|mean| / standard error` of a sample.
pub fn standardized_mean(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = ordered_mean(x.len(), |i| x[i]);
    let var = ordered_mean(x.len(), |i| (x[i] - mean) * (x[i] - mean)) * n / (n - 1.0).max(1.0);
    let se = (var / n).sqrt();
    if se == 0.0 {
        if mean == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        mean.abs() / se
    }
}

fn check_ito(st: &Setup, d: &mut BTreeMap<String, f64>) -> Result<CheckOutcome> {
    let pr = &st.problem;
    let vs = &st.config.verify;
    let (ut, vt) = probe_directions(pr, vs.direction_seed, 0);
    let lam = vs.ito_lambda;
    let total = st.config.ensemble.n_paths;
    let mut prod = Vec::with_capacity(total);
    let mut iso = Vec::with_capacity(total);
    for start in (0..total).step_by(BATCH) {
        let noise = st.noise_range(start..(start + BATCH).min(total))?;
        let y = simulate_state(pr, &pr.zero_u(), &pr.zero_v(), &noise)?;
        iso.extend(isometry_residuals(pr, &y));
        drop(y);
        let x1 = simulate_regularized_forward(pr, lam, ForwardInput::Distributed(&ut), &noise)?;
        let x2 = simulate_regularized_forward(pr, lam, ForwardInput::Boundary(&vt), &noise)?;
        prod.extend(ito_product_residuals(
            pr,
            lam,
            (&x1, ForwardInput::Distributed(&ut)),
            (&x2, ForwardInput::Boundary(&vt)),
        )?);
    }
    let zp = standardized_mean(&prod);
    let zi = standardized_mean(&iso);
    d.insert("product_z".into(), zp);
    d.insert("isometry_z".into(), zi);
    let value = zp.max(zi);
    Ok((value, vs.sigma_band, value <= vs.sigma_band))
}

pub fn optimizer_options(config: &ExperimentConfig) -> OptimizerOptions {
    OptimizerOptions {
        max_iter: config.solver.max_iter,
        tol: config.solver.tolerance,
        damping: config.solver.damping,
        initial_step: config.solver.initial_step,
        method: AdjointMethod::Regression(config.regression_options()),
        ..OptimizerOptions::default()
    }
}

/// Runs the optimizer from zero controls and writes the iteration log, the
/// final controls and a JSON report. Non-convergence is reported through
/// `OptimizationReport::converged`, never as an error.
pub fn optimize(config: &ExperimentConfig, method: Method, out: &Path) -> Result<OptimizationReport> {
    let st = Setup::new(config)?;
    ensure_dir(out)?;
    let pr = &st.problem;
    let strategy = if config.solver.resample {
        NoiseStrategy::Resample(EnsembleSpec::new(config.ensemble.n_paths, config.ensemble.seed))
    } else {
        NoiseStrategy::Frozen(st.noise()?)
    };
    let opts = optimizer_options(config);
    let (u0, v0) = (pr.zero_u(), pr.zero_v());
    let rep = match method {
        Method::Picard => optimize_picard(pr, &u0, &v0, config.alpha, &strategy, &opts)?,
        Method::GradientDescent => optimize_gradient_descent(pr, &u0, &v0, config.alpha, &strategy, &opts)?,
    };
    let name = method.name();
    let mut csv = Csv::new(&["iter", "cost", "residual", "residual_u", "residual_v"], &st.prov);
    for i in 0..rep.costs.len() {
        csv.row(&[i], &[rep.costs[i], rep.residuals[i], rep.residuals_u[i], rep.residuals_v[i]]);
    }
    csv.write(&out.join(format!("optimize_{name}.csv")))?;
    let g = &pr.grid;
    for (label, c) in [("u", &rep.final_u), ("v", &rep.final_v)] {
        let (arr, axes): (ndarray::ArrayD<f64>, &[&str]) = match c {
            ControlPath::Deterministic(a) => (a.clone().into_dyn(), &["step", "component"]),
            ControlPath::Pathwise(a) => (a.clone().into_dyn(), &["path", "step", "component"]),
        };
        write_array(out, &format!("control_{label}_{name}"), &arr, axes, g, &st.prov)?;
    }
    let mut summary = BTreeMap::new();
    summary.insert("method", serde_json::json!(name));
    summary.insert("converged", serde_json::json!(rep.converged));
    summary.insert("iterations", serde_json::json!(rep.iterations));
    summary.insert("final_cost", serde_json::json!(rep.final_cost()));
    summary.insert("final_residual", serde_json::json!(rep.final_residual()));
    summary.insert("line_search_failed", serde_json::json!(rep.line_search_failed));
    summary.insert("config_hash", serde_json::json!(st.prov.config_hash));
    summary.insert("tool", serde_json::json!(crate::io::TOOL));
    summary.insert("version", serde_json::json!(crate::io::VERSION));
    write_json(&out.join(format!("optimize_{name}.json")), &summary)?;
    Ok(rep)
}

/// Regularization sweep over `config.sweep.lambdas`, written to `sweep.csv`.
pub fn sweep(config: &ExperimentConfig, out: &Path) -> Result<RegularizationSweep> {
    let st = Setup::new(config)?;
    ensure_dir(out)?;
    let s = sweep_inner(&st)?;
    write_sweep_csv(&s, &st.prov, &out.join("sweep.csv"))?;
    Ok(s)
}
