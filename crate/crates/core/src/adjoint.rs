//! Backward adjoint equation
//! `dz* = -[-A z* + G^*(Phi) + (y - y_d)] dt + Phi dW`, `z*(T) = 0`.
//!
//! The discrete adjoint is the exact dual of the forward scheme. In the
//! variable `zeta_m = e^{A dt} z*_m` it reads
//! `zeta_m = E[a (1 + rho xi_m) zeta_{m+1} | F_m] + dt w (y_m - y_d(t_m))`,
//! which is the semigroup step
//! `z*_m = e^{-A dt}(E[z*_{m+1} | F_m] + dt (rho G^*(Phi_m) + w (y_m - y_d)))`.
//! Conditional expectations are least-squares projections on functions of
//! the current state of each mode; every mode is an autonomous scalar
//! diffusion driven by its own increment `xi_k`, so the sweep runs
//! independently per mode.
//!
//! `Phi_m` is stored through its loading `L_{m,k}`: `Phi_m e_j = sum_k C_kj L_{m,k} e_k`,
//! so `G^*(Phi_m)_k = s_k L_{m,k}`.

use ndarray::{s, Array1, Array2, Array3, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::{mean_over_paths, ControlPath, Problem, StepOperator, TimeGrid, TrajectoryEnsemble};
use crate::noise::{HsMatrix, NoiseModel};
use crate::regression::{standardize, Design};
use crate::spectral::SpectralSpace;
use crate::util::{ordered_mean, phi1, sq};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegressionBasis {
    /// `{1, y_k}`
    Affine,
    /// `{1, y_k, y_k^2}`
    Quadratic,
}

/// Which sample values the conditional expectations are fitted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegressionTarget {
    /// Regress the pathwise backward recursion driven by realized noise.
    /// Sample means of the adjoint are then exactly those of the realized
    /// recursion, which makes gradients exact for the frozen-noise cost.
    Realized,
    /// Regress fitted values of the previous time layer (step-by-step
    /// backward induction). Exact when the adjoint is affine in the state.
    Fitted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegressionOptions {
    pub basis: RegressionBasis,
    pub target: RegressionTarget,
    /// Keep the per-path step adjoint (needed for pathwise controls).
    pub keep_pathwise: bool,
}

impl Default for RegressionOptions {
    fn default() -> Self {
        Self {
            basis: RegressionBasis::Affine,
            target: RegressionTarget::Realized,
            keep_pathwise: false,
        }
    }
}

/// Adjoint samples on the forward ensemble.
#[derive(Debug, Clone)]
pub struct AdjointPair {
    /// `z*_m`, `M x (n_steps + 1) x N`, zero at the final time.
    pub zstar: Array3<f64>,
    /// Loadings `L_m` of `Phi_m`, `M x n_steps x N`.
    pub loading: Array3<f64>,
    /// Path mean of the step adjoint, `n_steps x N`.
    pub step_adjoint_mean: Array2<f64>,
    /// Step adjoint per path, when requested.
    pub step_adjoint: Option<Array3<f64>>,
    pub grid: TimeGrid,
    pub regularization: Option<f64>,
}

impl AdjointPair {
    pub fn n_paths(&self) -> usize {
        self.zstar.len_of(Axis(0))
    }

    /// `Phi_m` on path `p`.
    pub fn phi(&self, model: &NoiseModel, p: usize, m: usize) -> HsMatrix {
        let mut h = HsMatrix::zeros(model.n_modes(), model.n_noise());
        for ((k, j), v) in h.entries.indexed_iter_mut() {
            *v = model.entry(k, j) * self.loading[[p, m, k]];
        }
        h
    }

    /// `||Phi_m||^2_{L_2^0}` on path `p`.
    pub fn phi_norm_sq(&self, model: &NoiseModel, p: usize, m: usize) -> f64 {
        let s = model.effective_variance();
        (0..model.n_modes())
            .map(|k| s[k] * sq(self.loading[[p, m, k]]))
            .sum()
    }

    /// Sample mean of `z*`, `(n_steps + 1) x N`.
    pub fn mean(&self) -> Array2<f64> {
        mean_over_paths(&self.zstar)
    }

    /// Step adjoint `w_m` on path `p` for a pathwise gradient.
    pub fn step_adjoint_at(&self, p: usize, m: usize) -> Array1<f64> {
        match &self.step_adjoint {
            Some(w) => w.slice(s![p, m, ..]).to_owned(),
            None => self.step_adjoint_mean.row(m).to_owned(),
        }
    }
}

/// Least-squares adjoint for the original system.
pub fn solve_regression(
    problem: &Problem,
    state: &TrajectoryEnsemble,
    options: &RegressionOptions,
) -> Result<AdjointPair> {
    let op = StepOperator::new(problem, None)?;
    backward_regression(problem, &op, state, options, None)
}

/// Per-mode results, laid out `step x path`.
struct ModeSweep {
    zstar: Array2<f64>,
    loading: Array2<f64>,
    step: Array2<f64>,
}

pub(crate) fn backward_regression(
    problem: &Problem,
    op: &StepOperator,
    state: &TrajectoryEnsemble,
    options: &RegressionOptions,
    regularization: Option<f64>,
) -> Result<AdjointPair> {
    let n = problem.n_modes();
    let steps = problem.grid.n_steps;
    let m_paths = state.n_paths();
    if state.states.dim() != (m_paths, steps + 1, n) {
        return Err(Error::DimensionMismatch {
            what: "state ensemble shape",
            expected: steps + 1,
            got: state.states.len_of(Axis(1)),
        });
    }
    if state.states.iter().any(|v| !v.is_finite()) {
        let k = (0..n)
            .find(|&k| state.states.slice(s![.., .., k]).iter().any(|v| !v.is_finite()))
            .unwrap_or(0);
        return Err(Error::RankDeficient { mode: k, step: 0 });
    }
    let dt = problem.grid.dt();
    let xi = state.noise.effective(&problem.noise);
    let svar = problem.noise.effective_variance();
    let sweeps: Vec<Result<ModeSweep>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let lam = problem.space.eigenvalues()[k];
            sweep_mode(
                k,
                state.states.slice(s![.., .., k]).t().as_standard_layout().into_owned(),
                xi.slice(s![.., .., k]).t().as_standard_layout().into_owned(),
                problem.cost.y_d.column(k).to_owned(),
                ModeCoefficients {
                    a: op.decay[k],
                    rho: op.noise_factor[k],
                    weight: op.driver_weight[k],
                    phi1: phi1(lam * dt),
                    s: svar[k],
                    dt,
                },
                options,
            )
        })
        .collect();
    let mut zstar = Array3::zeros((m_paths, steps + 1, n));
    let mut loading = Array3::zeros((m_paths, steps, n));
    let mut step = if options.keep_pathwise {
        Some(Array3::zeros((m_paths, steps, n)))
    } else {
        None
    };
    let mut step_mean = Array2::zeros((steps, n));
    for (k, sw) in sweeps.into_iter().enumerate() {
        let sw = sw?;
        zstar.slice_mut(s![.., .., k]).assign(&sw.zstar.t());
        loading.slice_mut(s![.., .., k]).assign(&sw.loading.t());
        for mm in 0..steps {
            step_mean[[mm, k]] = sw.step.row(mm).sum() / m_paths as f64;
        }
        if let Some(w) = step.as_mut() {
            w.slice_mut(s![.., .., k]).assign(&sw.step.t());
        }
    }
    Ok(AdjointPair {
        zstar,
        loading,
        step_adjoint_mean: step_mean,
        step_adjoint: step,
        grid: problem.grid,
        regularization,
    })
}

/// Path mean of the step adjoint under the realized target, without the
/// regressions: a least-squares projection with an intercept preserves the
/// sample mean, so only the pathwise recursion is needed. Summation runs over
/// fixed blocks of paths in order.
pub(crate) fn realized_step_adjoint_mean(
    problem: &Problem,
    op: &StepOperator,
    state: &TrajectoryEnsemble,
) -> Result<Array2<f64>> {
    const BLOCK: usize = 64;
    let n = problem.n_modes();
    let steps = problem.grid.n_steps;
    let m_paths = state.n_paths();
    if state.states.dim() != (m_paths, steps + 1, n) {
        return Err(Error::DimensionMismatch {
            what: "state ensemble shape",
            expected: steps + 1,
            got: state.states.len_of(Axis(1)),
        });
    }
    let dt = problem.grid.dt();
    let yd = &problem.cost.y_d;
    let weight: Vec<f64> = (0..n)
        .map(|k| phi1(problem.space.eigenvalues()[k] * dt))
        .collect();
    let n_blocks = m_paths.div_ceil(BLOCK);
    let partial: Vec<Array2<f64>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut acc = Array2::<f64>::zeros((steps, n));
            let mut xi = vec![0.0; n];
            for p in b * BLOCK..((b + 1) * BLOCK).min(m_paths) {
                let y = state.states.index_axis(Axis(0), p);
                let dw = state.noise.increments.index_axis(Axis(0), p);
                let mut zeta = vec![0.0; n];
                for m in (0..steps).rev() {
                    problem.noise.effective_increment(dw.row(m), &mut xi);
                    for k in 0..n {
                        acc[[m, k]] += zeta[k];
                        zeta[k] = op.decay[k] * (1.0 + op.noise_factor[k] * xi[k]) * zeta[k]
                            + dt * op.driver_weight[k] * (y[[m, k]] - yd[[m, k]]);
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = Array2::<f64>::zeros((steps, n));
    for a in &partial {
        total += a;
    }
    for mut row in total.rows_mut() {
        for (v, w) in row.iter_mut().zip(&weight) {
            *v *= w / m_paths as f64;
        }
    }
    Ok(total)
}

#[derive(Clone, Copy)]
struct ModeCoefficients {
    a: f64,
    rho: f64,
    weight: f64,
    phi1: f64,
    s: f64,
    dt: f64,
}

fn basis_columns(y: &[f64], basis: RegressionBasis) -> Vec<Vec<f64>> {
    let mut cols = vec![vec![1.0; y.len()]];
    if let Some(z) = standardize(y) {
        if basis == RegressionBasis::Quadratic {
            let z2: Vec<f64> = z.iter().map(|v| v * v - 1.0).collect();
            cols.push(z);
            cols.push(z2);
        } else {
            cols.push(z);
        }
    }
    cols
}

/// `y` is `(n_steps + 1) x M`, `xi` is `n_steps x M`.
fn sweep_mode(
    k: usize,
    y: Array2<f64>,
    xi: Array2<f64>,
    yd: Array1<f64>,
    c: ModeCoefficients,
    options: &RegressionOptions,
) -> Result<ModeSweep> {
    let (np1, m_paths) = y.dim();
    let steps = np1 - 1;
    let mut zstar = Array2::zeros((np1, m_paths));
    let mut loading = Array2::zeros((steps, m_paths));
    let mut step = Array2::zeros((steps, m_paths));
    let mut zeta_fit = vec![0.0; m_paths];
    let mut zeta_real = vec![0.0; m_paths];
    let noise_scale = (c.s * c.dt).sqrt();

    for m in (0..steps).rev() {
        let ym: Vec<f64> = y.row(m).to_vec();
        let xm: Vec<f64> = xi.row(m).to_vec();
        let resid: Vec<f64> = ym.iter().map(|v| c.weight * (v - yd[m])).collect();
        let cols = basis_columns(&ym, options.basis);
        let q = cols.len();
        let mut design = Design::new();
        for col in cols {
            design.push(col);
        }
        let stochastic = c.s > 0.0 && m_paths >= 2 && xm.iter().any(|v| *v != 0.0);
        if stochastic {
            for i in 0..q {
                let prod: Vec<f64> = design
                    .col(i)
                    .iter()
                    .zip(&xm)
                    .map(|(b, x)| b * x / noise_scale)
                    .collect();
                design.push(prod);
            }
        }
        if m_paths < design.len() {
            return Err(Error::RankDeficient { mode: k, step: m });
        }
        let coef = design
            .fit(&[&zeta_fit])
            .ok_or(Error::RankDeficient { mode: k, step: m })?;
        let cont_fit = design.eval(&coef[0][..q], 0..q);
        let load_zeta: Vec<f64> = if stochastic {
            design
                .eval(&coef[0][q..], 0..q)
                .into_iter()
                .map(|v| v / noise_scale)
                .collect()
        } else {
            vec![0.0; m_paths]
        };

        let (zeta_m, cont): (Vec<f64>, Vec<f64>) = match options.target {
            RegressionTarget::Fitted => {
                let z = (0..m_paths)
                    .map(|p| {
                        c.a * (cont_fit[p] + c.rho * c.s * c.dt * load_zeta[p]) + c.dt * resid[p]
                    })
                    .collect();
                (z, cont_fit)
            }
            RegressionTarget::Realized => {
                let next: Vec<f64> = (0..m_paths)
                    .map(|p| c.a * (1.0 + c.rho * xm[p]) * zeta_real[p] + c.dt * resid[p])
                    .collect();
                let mut plain = Design::new();
                for i in 0..q {
                    plain.push(design.col(i).to_vec());
                }
                let cf = plain
                    .fit(&[&next, &zeta_real])
                    .ok_or(Error::RankDeficient { mode: k, step: m })?;
                let z = plain.eval(&cf[0], 0..q);
                let cont = plain.eval(&cf[1], 0..q);
                zeta_real = next;
                (z, cont)
            }
        };
        for p in 0..m_paths {
            loading[[m, p]] = c.a * load_zeta[p];
            step[[m, p]] = c.phi1 * cont[p];
            zstar[[m, p]] = c.a * zeta_m[p];
        }
        zeta_fit = zeta_m;
    }
    Ok(ModeSweep {
        zstar,
        loading,
        step,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AffineScheme {
    /// Classical RK4 on the Riccati and offset ODEs, `substeps` per interval.
    ContinuousRk4 { substeps: usize },
    /// The recursion the discrete scheme satisfies exactly.
    GridConsistent,
}

/// `z*(t) = p(t) y(t) + eta(t)` mode by mode, for diagonal noise and
/// deterministic controls.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineRepresentation {
    /// `p` at the grid points, `(n_steps + 1) x N`.
    pub p: Array2<f64>,
    /// `eta` at the grid points, `(n_steps + 1) x N`.
    pub eta: Array2<f64>,
    pub scheme: AffineScheme,
    pub grid: TimeGrid,
    decay: Array1<f64>,
    phi1: Array1<f64>,
    input: Array2<f64>,
}

/// Solves for the affine form of the adjoint. `regularization = Some(lambda)`
/// gives the adjoint of the resolvent-regularized backward equation.
pub fn solve_affine(
    problem: &Problem,
    u: &ControlPath,
    v: &ControlPath,
    scheme: AffineScheme,
    regularization: Option<f64>,
) -> Result<AffineRepresentation> {
    if !problem.noise.is_diagonal() {
        return Err(Error::Unsupported(
            "affine representation requires diagonal noise coupling".into(),
        ));
    }
    let (ua, va) = match (u, v) {
        (ControlPath::Deterministic(a), ControlPath::Deterministic(b)) => (a, b),
        _ => {
            return Err(Error::Unsupported(
                "affine representation requires deterministic controls".into(),
            ))
        }
    };
    let n = problem.n_modes();
    let steps = problem.grid.n_steps;
    if ua.dim() != (steps, n) || va.dim() != (steps, problem.space.boundary_dim()) {
        return Err(Error::DimensionMismatch {
            what: "control shape",
            expected: steps,
            got: ua.nrows(),
        });
    }
    let op = StepOperator::new(problem, regularization)?;
    let plain = StepOperator::new(problem, None)?;
    let dt = problem.grid.dt();
    let eig = problem.space.eigenvalues();
    let svar = problem.noise.effective_variance();
    let yd = &problem.cost.y_d;
    let mut p = Array2::zeros((steps + 1, n));
    let mut eta = Array2::zeros((steps + 1, n));
    let grid_input = ua.dot(&plain.u_gain.t()) + va.dot(&plain.v_gain.t());
    match scheme {
        AffineScheme::GridConsistent => {
            for k in 0..n {
                let a = op.decay[k];
                let (rho, w, s) = (op.noise_factor[k], op.driver_weight[k], svar[k]);
                let (mut pz, mut ez) = (0.0, 0.0);
                for m in (0..steps).rev() {
                    let pn = a * a * (1.0 + rho * s * dt) * pz + dt * w;
                    let en = a * (pz * grid_input[[m, k]] + ez) - dt * w * yd[[m, k]];
                    pz = pn;
                    ez = en;
                    p[[m, k]] = a * pz;
                    eta[[m, k]] = a * ez;
                }
            }
        }
        AffineScheme::ContinuousRk4 { substeps } => {
            if substeps == 0 {
                return Err(Error::config("substeps", "must be at least 1"));
            }
            let cont_input = ua.dot(&problem.control_op.t())
                + va.dot(&problem.space.weighted_lift(1.0).t());
            let h = -dt / substeps as f64;
            for k in 0..n {
                let lam = eig[k];
                let (rho, w, s) = (op.noise_factor[k], op.driver_weight[k], svar[k]);
                let (mut pp, mut ee) = (0.0f64, 0.0f64);
                for m in (0..steps).rev() {
                    let b = cont_input[[m, k]];
                    let target = yd[[m, k]];
                    let f = |p: f64, e: f64| {
                        (
                            (2.0 * lam - rho * s) * p - w,
                            lam * e + w * target - p * b,
                        )
                    };
                    for _ in 0..substeps {
                        let (k1p, k1e) = f(pp, ee);
                        let (k2p, k2e) = f(pp + 0.5 * h * k1p, ee + 0.5 * h * k1e);
                        let (k3p, k3e) = f(pp + 0.5 * h * k2p, ee + 0.5 * h * k2e);
                        let (k4p, k4e) = f(pp + h * k3p, ee + h * k3e);
                        pp += h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
                        ee += h / 6.0 * (k1e + 2.0 * k2e + 2.0 * k3e + k4e);
                    }
                    p[[m, k]] = pp;
                    eta[[m, k]] = ee;
                }
            }
        }
    }
    Ok(AffineRepresentation {
        p,
        eta,
        scheme,
        grid: problem.grid,
        decay: op.decay.clone(),
        phi1: eig.mapv(|l| phi1(l * dt)),
        input: grid_input,
    })
}

impl AffineRepresentation {
    /// Adjoint samples `z*_m = p_m y_m + eta_m` on a forward ensemble.
    pub fn evaluate(&self, state: &TrajectoryEnsemble, keep_pathwise: bool) -> Result<AdjointPair> {
        let (m_paths, np1, n) = state.states.dim();
        if np1 != self.p.nrows() || n != self.p.ncols() {
            return Err(Error::DimensionMismatch {
                what: "state ensemble shape",
                expected: self.p.nrows(),
                got: np1,
            });
        }
        let steps = np1 - 1;
        let mut zstar = Array3::zeros((m_paths, np1, n));
        let mut loading = Array3::zeros((m_paths, steps, n));
        let mut step = Array3::zeros((m_paths, steps, n));
        let grid_scheme = self.scheme == AffineScheme::GridConsistent;
        zstar
            .axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(loading.axis_iter_mut(Axis(0)))
            .zip(step.axis_iter_mut(Axis(0)))
            .zip(state.states.axis_iter(Axis(0)))
            .for_each(|(((mut z, mut l), mut w), y)| {
                for m in 0..np1 {
                    for k in 0..n {
                        z[[m, k]] = self.p[[m, k]] * y[[m, k]] + self.eta[[m, k]];
                    }
                }
                for m in 0..steps {
                    for k in 0..n {
                        let a = self.decay[k];
                        l[[m, k]] = if grid_scheme {
                            a * self.p[[m + 1, k]] * y[[m, k]]
                        } else {
                            self.p[[m, k]] * y[[m, k]]
                        };
                        let cont = self.p[[m + 1, k]] * (a * y[[m, k]] + self.input[[m, k]])
                            + self.eta[[m + 1, k]];
                        w[[m, k]] = self.phi1[k] / a * cont;
                    }
                }
            });
        let step_mean = mean_over_paths(&step);
        Ok(AdjointPair {
            zstar,
            loading,
            step_adjoint_mean: step_mean,
            step_adjoint: if keep_pathwise { Some(step) } else { None },
            grid: self.grid,
            regularization: None,
        })
    }
}

/// `E sum_m dt ||A^eps z*_m||^2` for `eps` in `[0, 1)`.
pub fn adjoint_regularity_norm(pair: &AdjointPair, space: &SpectralSpace, eps: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::config("eps", format!("must lie in [0, 1), got {eps}")));
    }
    let dt = pair.grid.dt();
    let steps = pair.grid.n_steps;
    let w = space.eigenvalues().mapv(|l| l.powf(2.0 * eps));
    Ok(ordered_mean(pair.n_paths(), |p| {
        let z = pair.zstar.index_axis(Axis(0), p);
        let mut acc = 0.0;
        for m in 0..steps {
            acc += z.row(m).iter().zip(w.iter()).map(|(v, w)| w * v * v).sum::<f64>();
        }
        dt * acc
    }))
}
