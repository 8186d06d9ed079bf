//! Resolvent-regularized sensitivity and adjoint systems.
//!
//! With `R = lambda R(lambda)` the regularized derivatives solve
//! `dz = (-A z + R B u) dt + R G(R z) dW` (resp. input `A R D v`), and the
//! regularized adjoint has driver `R G^*(R Phi) + R (y - y_d)`. All inputs
//! become bounded in `H`, so the processes also satisfy the integrated strong
//! form, whose residual on the grid is measured here.

use std::sync::Arc;

use ndarray::{Array1, Axis};
use rayon::prelude::*;

use crate::adjoint::{backward_regression, AdjointPair, RegressionOptions};
use crate::error::{Error, Result};
use crate::forward::{propagate, simulate_state, simulate_z1, simulate_z2, ControlPath, Problem, StepOperator, TrajectoryEnsemble};
use crate::noise::NoiseEnsemble;
use crate::spectral::{resolvent_factors, Field};
use crate::util::{ordered_mean, sq};

/// Input of a regularized sensitivity run.
#[derive(Debug, Clone, Copy)]
pub enum ForwardInput<'a> {
    Distributed(&'a ControlPath),
    Boundary(&'a ControlPath),
}

fn factors(problem: &Problem, lambda: Option<f64>) -> Result<Array1<f64>> {
    match lambda {
        Some(l) => resolvent_factors(&problem.space, l),
        None => Ok(Array1::ones(problem.n_modes())),
    }
}

/// Regularized derivative `z1(lambda)` or `z2(lambda)`, zero initial data.
pub fn simulate_regularized_forward(
    problem: &Problem,
    lambda: f64,
    input: ForwardInput<'_>,
    noise: &Arc<NoiseEnsemble>,
) -> Result<TrajectoryEnsemble> {
    let op = StepOperator::new(problem, Some(lambda))?;
    let zero = Field::zeros(problem.n_modes());
    match input {
        ForwardInput::Distributed(u) => propagate(problem, &op, &zero, u, &problem.zero_v(), noise),
        ForwardInput::Boundary(v) => propagate(problem, &op, &zero, &problem.zero_u(), v, noise),
    }
}

/// RMS over paths and grid points of
/// `z_m - sum_{l<m} [dt (-A z_l + c_l) + R G(R z_l) dW_l]`, where `c` is the
/// (regularized) strong-form input. `lambda = None` checks the unregularized
/// derivative against the same form.
pub fn strong_residual(
    problem: &Problem,
    trajectory: &TrajectoryEnsemble,
    input: ForwardInput<'_>,
    lambda: Option<f64>,
) -> Result<f64> {
    let n = problem.n_modes();
    let steps = problem.grid.n_steps;
    if trajectory.states.dim().1 != steps + 1 || trajectory.n_modes() != n {
        return Err(Error::DimensionMismatch {
            what: "trajectory shape",
            expected: steps + 1,
            got: trajectory.states.dim().1,
        });
    }
    let r = factors(problem, lambda)?;
    let eig = problem.space.eigenvalues().clone();
    let dt = problem.grid.dt();
    let (ctrl, gain) = match input {
        ForwardInput::Distributed(u) => (u, problem.control_op.clone()),
        ForwardInput::Boundary(v) => (v, problem.space.weighted_lift(1.0)),
    };
    if ctrl.n_steps() != steps || ctrl.dim() != gain.ncols() {
        return Err(Error::DimensionMismatch {
            what: "strong-form input",
            expected: gain.ncols(),
            got: ctrl.dim(),
        });
    }
    let ms = ordered_mean(trajectory.n_paths(), |p| {
        let z = trajectory.states.index_axis(Axis(0), p);
        let dw = trajectory.noise.increments.index_axis(Axis(0), p);
        let mut xi = vec![0.0; n];
        let mut integral = z.row(0).to_owned();
        let mut acc = 0.0;
        for m in 0..steps {
            problem.noise.effective_increment(dw.row(m), &mut xi);
            let c = gain.dot(&ctrl.at(p, m));
            for k in 0..n {
                let zl = z[[m, k]];
                integral[k] += dt * (-eig[k] * zl + r[k] * c[k]) + r[k] * r[k] * zl * xi[k];
            }
            acc += z
                .row(m + 1)
                .iter()
                .zip(integral.iter())
                .map(|(a, b)| sq(a - b))
                .sum::<f64>();
        }
        acc / steps as f64
    });
    Ok(ms.sqrt())
}

/// Per-path residual of the Ito product formula for two regularized
/// sensitivities started at zero, written for the semigroup-weighted
/// processes `Y = e^{-A(T-t)} X`, which satisfy `dY = e^{-A(T-t)} R c dt + R G(R Y) dW`:
/// `<Y1_n, Y2_n> - sum_m [<Y1, b2> + <b1, Y2> + <b1, b2> + <R G(R Y1), R G(R Y2)>_HS dt
///  + <Y1 + b1, R G(R Y2) dW> + <R G(R Y1) dW, Y2 + b2>]`,
/// where `b` is the exact integral of the weighted input over the step.
/// `<Y1_n, Y2_n> = <X1_T, X2_T>`, and the residual has mean zero.
pub fn ito_product_residuals(
    problem: &Problem,
    lambda: f64,
    x1: (&TrajectoryEnsemble, ForwardInput<'_>),
    x2: (&TrajectoryEnsemble, ForwardInput<'_>),
) -> Result<Vec<f64>> {
    let n = problem.n_modes();
    let steps = problem.grid.n_steps;
    let r = resolvent_factors(&problem.space, lambda)?;
    let eig = problem.space.eigenvalues().clone();
    let s = problem.noise.effective_variance().clone();
    let grid = problem.grid;
    let dt = grid.dt();
    let strong_input = |input: ForwardInput<'_>| -> Result<(ControlPath, ndarray::Array2<f64>)> {
        let (ctrl, gain) = match input {
            ForwardInput::Distributed(u) => (u, problem.control_op.clone()),
            ForwardInput::Boundary(v) => (v, problem.space.weighted_lift(1.0)),
        };
        if ctrl.n_steps() != steps || ctrl.dim() != gain.ncols() {
            return Err(Error::DimensionMismatch {
                what: "strong-form input",
                expected: gain.ncols(),
                got: ctrl.dim(),
            });
        }
        Ok((ctrl.clone(), gain))
    };
    let (c1, g1) = strong_input(x1.1)?;
    let (c2, g2) = strong_input(x2.1)?;
    let (a, b) = (x1.0, x2.0);
    if a.states.dim() != b.states.dim() || a.states.dim().1 != steps + 1 || a.n_modes() != n {
        return Err(Error::DimensionMismatch {
            what: "trajectory shape",
            expected: steps + 1,
            got: b.states.dim().1,
        });
    }
    if !Arc::ptr_eq(&a.noise, &b.noise) && a.noise.increments != b.noise.increments {
        return Err(Error::config("ensemble", "both processes must share one noise ensemble"));
    }
    // weight = e^{-lambda_k (T - t_m)}, step_integral = int over [t_m, t_{m+1}] of the weight.
    let weight = ndarray::Array2::from_shape_fn((steps + 1, n), |(m, k)| {
        (-eig[k] * (grid.horizon - grid.time(m))).exp()
    });
    let step_integral = ndarray::Array2::from_shape_fn((steps, n), |(m, k)| {
        weight[[m + 1, k]] * -(-eig[k] * dt).exp_m1() / eig[k]
    });
    let out = (0..a.n_paths())
        .into_par_iter()
        .map(|p| {
            let z1 = a.states.index_axis(Axis(0), p);
            let z2 = b.states.index_axis(Axis(0), p);
            let dw = a.noise.increments.index_axis(Axis(0), p);
            let mut xi = vec![0.0; n];
            let mut acc = 0.0;
            for m in 0..steps {
                problem.noise.effective_increment(dw.row(m), &mut xi);
                let f1 = g1.dot(&c1.at(p, m));
                let f2 = g2.dot(&c2.at(p, m));
                for k in 0..n {
                    let w = weight[[m, k]];
                    let (y1, y2) = (w * z1[[m, k]], w * z2[[m, k]]);
                    let rho = r[k] * r[k];
                    let b1 = step_integral[[m, k]] * r[k] * f1[k];
                    let b2 = step_integral[[m, k]] * r[k] * f2[k];
                    acc += y1 * b2 + b1 * y2 + b1 * b2 + dt * rho * rho * s[k] * y1 * y2;
                    acc += rho * xi[k] * ((y1 + b1) * y2 + y1 * (y2 + b2));
                }
            }
            let end: f64 = z1.row(steps).dot(&z2.row(steps));
            end - acc
        })
        .collect();
    Ok(out)
}

/// Regression adjoint of the regularized backward equation on the state
/// ensemble of the original system.
pub fn solve_regularized_backward(
    problem: &Problem,
    lambda: f64,
    state: &TrajectoryEnsemble,
    options: &RegressionOptions,
) -> Result<AdjointPair> {
    let op = StepOperator::new(problem, Some(lambda))?;
    backward_regression(problem, &op, state, options, Some(lambda))
}

/// RMS over paths and grid points of the integrated strong backward form
/// `z*_m - sum_{l>=m} dt (-A z*_l + R G^*(R Phi_l) + R (y_l - y_d)) + sum_{l>=m} Phi_l dW_l`.
pub fn backward_strong_residual(
    problem: &Problem,
    state: &TrajectoryEnsemble,
    pair: &AdjointPair,
) -> Result<f64> {
    let n = problem.n_modes();
    let steps = problem.grid.n_steps;
    if pair.zstar.dim() != state.states.dim() {
        return Err(Error::DimensionMismatch {
            what: "adjoint shape",
            expected: state.states.len(),
            got: pair.zstar.len(),
        });
    }
    let r = factors(problem, pair.regularization)?;
    let eig = problem.space.eigenvalues().clone();
    let s = problem.noise.effective_variance().clone();
    let dt = problem.grid.dt();
    let yd = &problem.cost.y_d;
    let ms = ordered_mean(state.n_paths(), |p| {
        let z = pair.zstar.index_axis(Axis(0), p);
        let l = pair.loading.index_axis(Axis(0), p);
        let y = state.states.index_axis(Axis(0), p);
        let dw = state.noise.increments.index_axis(Axis(0), p);
        let mut xi = vec![0.0; n];
        let mut tail = Array1::<f64>::zeros(n);
        let mut acc = 0.0;
        for m in (0..steps).rev() {
            problem.noise.effective_increment(dw.row(m), &mut xi);
            for k in 0..n {
                let drift = -eig[k] * z[[m, k]]
                    + r[k] * r[k] * s[k] * l[[m, k]]
                    + r[k] * (y[[m, k]] - yd[[m, k]]);
                tail[k] += dt * drift - l[[m, k]] * xi[k];
            }
            acc += (0..n).map(|k| sq(z[[m, k]] - tail[k])).sum::<f64>();
        }
        acc / steps as f64
    });
    Ok(ms.sqrt())
}

/// L^2 gaps between regularized and original solutions along a lambda sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizationSweep {
    pub lambdas: Vec<f64>,
    /// `(E int ||z1 - z1(lambda)||^2)^{1/2}`
    pub errors_forward_u: Vec<f64>,
    /// `(E int ||z2 - z2(lambda)||^2)^{1/2}`
    pub errors_forward_v: Vec<f64>,
    /// `(max_m E ||z*_m - z*_m(lambda)||^2)^{1/2}`
    pub errors_backward_z: Vec<f64>,
    /// `(E int ||Phi - Phi(lambda)||^2_{L_2^0})^{1/2}`
    pub errors_backward_phi: Vec<f64>,
}

fn l2_gap(a: &TrajectoryEnsemble, b: &TrajectoryEnsemble, dt: f64) -> f64 {
    let steps = a.grid.n_steps;
    ordered_mean(a.n_paths(), |p| {
        let x = a.states.index_axis(Axis(0), p);
        let y = b.states.index_axis(Axis(0), p);
        let mut s = 0.0;
        for m in 0..steps {
            s += x.row(m).iter().zip(y.row(m).iter()).map(|(u, v)| sq(u - v)).sum::<f64>();
        }
        dt * s
    })
    .sqrt()
}

/// Sensitivities in directions `u_tilde`, `v_tilde` and the adjoint at
/// `(u, v)`, regularized at each `lambda` and compared against the original
/// systems on one shared noise ensemble.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    problem: &Problem,
    u: &ControlPath,
    v: &ControlPath,
    u_tilde: &ControlPath,
    v_tilde: &ControlPath,
    lambdas: &[f64],
    noise: &Arc<NoiseEnsemble>,
    options: &RegressionOptions,
) -> Result<RegularizationSweep> {
    if lambdas.is_empty() {
        return Err(Error::config("sweep.lambdas", "must not be empty"));
    }
    if lambdas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("sweep.lambdas", "must be strictly increasing"));
    }
    let dt = problem.grid.dt();
    let y = simulate_state(problem, u, v, noise)?;
    let z1 = simulate_z1(problem, u_tilde, noise)?;
    let z2 = simulate_z2(problem, v_tilde, noise)?;
    let base = crate::adjoint::solve_regression(problem, &y, options)?;
    let s = problem.noise.effective_variance().clone();
    let steps = problem.grid.n_steps;
    let mut out = RegularizationSweep {
        lambdas: lambdas.to_vec(),
        errors_forward_u: Vec::new(),
        errors_forward_v: Vec::new(),
        errors_backward_z: Vec::new(),
        errors_backward_phi: Vec::new(),
    };
    for &lam in lambdas {
        let z1l = simulate_regularized_forward(problem, lam, ForwardInput::Distributed(u_tilde), noise)?;
        out.errors_forward_u.push(l2_gap(&z1, &z1l, dt));
        drop(z1l);
        let z2l = simulate_regularized_forward(problem, lam, ForwardInput::Boundary(v_tilde), noise)?;
        out.errors_forward_v.push(l2_gap(&z2, &z2l, dt));
        drop(z2l);
        let adj = solve_regularized_backward(problem, lam, &y, options)?;
        let mpaths = y.n_paths();
        let mut sup = 0.0f64;
        for m in 0..=steps {
            let e = ordered_mean(mpaths, |p| {
                (0..problem.n_modes())
                    .map(|k| sq(base.zstar[[p, m, k]] - adj.zstar[[p, m, k]]))
                    .sum()
            });
            sup = sup.max(e);
        }
        out.errors_backward_z.push(sup.sqrt());
        let phi = ordered_mean(mpaths, |p| {
            let mut acc = 0.0;
            for m in 0..steps {
                for k in 0..problem.n_modes() {
                    acc += s[k] * sq(base.loading[[p, m, k]] - adj.loading[[p, m, k]]);
                }
            }
            dt * acc
        });
        out.errors_backward_phi.push(phi.sqrt());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{CostConfig, TimeGrid};
    use crate::noise::{EnsembleSpec, NoiseModel};
    use crate::spectral::SpectralSpace;
    use ndarray::Array2;

    #[test]
    fn scalar_closed_form_for_constant_control() {
        let space = SpectralSpace::new(Array1::from_elem(1, 2.0), Array2::from_elem((1, 1), 0.5), 0.26).unwrap();
        let noise_model = NoiseModel::power_law(1, 1, 1.0, -2.0, 0.0).unwrap();
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let cost = CostConfig { y_d: Array2::zeros((16, 1)), kappa1: 1.0, kappa2: 1.0 };
        let pr = Problem::new(space, noise_model, grid, Array2::eye(1), Field::zeros(1), cost).unwrap();
        let noise = Arc::new(NoiseEnsemble::sample(&pr.noise, 16, grid.dt(), &EnsembleSpec::new(1, 0)).unwrap());
        let u = ControlPath::Deterministic(Array2::from_elem((16, 1), 3.0));
        let z = simulate_regularized_forward(&pr, 5.0, ForwardInput::Distributed(&u), &noise).unwrap();
        let exact = 5.0 / 7.0 * 3.0 * (1.0 - (-2.0f64).exp()) / 2.0;
        assert!((z.states[[0, 16, 0]] - exact).abs() < 1e-14);
        let res = strong_residual(&pr, &z, ForwardInput::Distributed(&u), Some(5.0)).unwrap();
        assert!(res < 10.0 * grid.dt(), "{res}");
    }
}
