//! Exponential Euler ensembles for the controlled state and its Fréchet
//! derivatives.
//!
//! Mode `k` advances as
//! `y_{m+1} = a_k (y_m + rho_k y_m xi_{m,k}) + b_{m,k}` with `a_k = e^{-lambda_k dt}`,
//! `xi` the increment seen by the mode and `b_m` the exact integral of the
//! held control over the step:
//! `b_m = A^{-1}(I - e^{-A dt}) R B u_m + (I - e^{-A dt}) R D v_m`.
//! `R = I`, `rho = 1` for the original system; the resolvent-regularized
//! system uses `R = lambda R(lambda)` and `rho_k = r_k^2`.

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::noise::{NoiseEnsemble, NoiseModel};
use crate::spectral::{resolvent_factors, Field, SpectralSpace};
use crate::util::{ordered_mean, sq};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub horizon: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::config("grid.horizon", "must be positive"));
        }
        if n_steps < 2 {
            return Err(Error::config("grid.n_steps", "must be at least 2"));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn time(&self, m: usize) -> f64 {
        self.horizon * m as f64 / self.n_steps as f64
    }
}

/// Piecewise constant control, one value per step `[t_m, t_{m+1})`.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlPath {
    /// `n_steps x dim`, shared by every sample path.
    Deterministic(Array2<f64>),
    /// `M x n_steps x dim`, adapted to the sample path.
    Pathwise(Array3<f64>),
}

/// Boundary controls have the same layout with `dim = N_b`.
pub type BoundaryControlPath = ControlPath;

impl ControlPath {
    pub fn zeros(n_steps: usize, dim: usize) -> Self {
        ControlPath::Deterministic(Array2::zeros((n_steps, dim)))
    }

    pub fn dim(&self) -> usize {
        match self {
            ControlPath::Deterministic(a) => a.ncols(),
            ControlPath::Pathwise(a) => a.len_of(Axis(2)),
        }
    }

    pub fn n_steps(&self) -> usize {
        match self {
            ControlPath::Deterministic(a) => a.nrows(),
            ControlPath::Pathwise(a) => a.len_of(Axis(1)),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, ControlPath::Deterministic(_))
    }

    pub fn at(&self, path: usize, step: usize) -> ArrayView1<'_, f64> {
        match self {
            ControlPath::Deterministic(a) => a.row(step),
            ControlPath::Pathwise(a) => a.slice(ndarray::s![path, step, ..]),
        }
    }

    /// `self + s * other`; pathwise if either operand is.
    pub fn axpy(&self, s: f64, other: &ControlPath) -> Result<ControlPath> {
        if self.dim() != other.dim() || self.n_steps() != other.n_steps() {
            return Err(Error::DimensionMismatch {
                what: "control shape",
                expected: self.dim() * self.n_steps(),
                got: other.dim() * other.n_steps(),
            });
        }
        use ControlPath::*;
        Ok(match (self, other) {
            (Deterministic(a), Deterministic(b)) => Deterministic(a + &(b * s)),
            (Pathwise(a), Pathwise(b)) => {
                if a.dim() != b.dim() {
                    return Err(Error::DimensionMismatch {
                        what: "pathwise control paths",
                        expected: a.len_of(Axis(0)),
                        got: b.len_of(Axis(0)),
                    });
                }
                Pathwise(a + &(b * s))
            }
            (Pathwise(a), Deterministic(b)) => Pathwise(a + &(b * s)),
            (Deterministic(a), Pathwise(b)) => Pathwise(&(b * s) + a),
        })
    }

    pub fn scale(&self, s: f64) -> ControlPath {
        match self {
            ControlPath::Deterministic(a) => ControlPath::Deterministic(a * s),
            ControlPath::Pathwise(a) => ControlPath::Pathwise(a * s),
        }
    }

    /// `E sum_m dt <self_m, other_m>`.
    pub fn inner(&self, other: &ControlPath, dt: f64) -> f64 {
        use ControlPath::*;
        match (self, other) {
            (Deterministic(a), Deterministic(b)) => dt * (a * b).sum(),
            _ => {
                let m = match (self, other) {
                    (Pathwise(a), _) | (_, Pathwise(a)) => a.len_of(Axis(0)),
                    _ => unreachable!(),
                };
                ordered_mean(m, |p| {
                    let mut s = 0.0;
                    for step in 0..self.n_steps() {
                        s += self.at(p, step).dot(&other.at(p, step));
                    }
                    dt * s
                })
            }
        }
    }

    /// `L^2(Omega x [0,T])` norm.
    pub fn norm(&self, dt: f64) -> f64 {
        self.inner(self, dt).sqrt()
    }

    fn check(&self, what: &'static str, n_steps: usize, dim: usize, n_paths: usize) -> Result<()> {
        if self.n_steps() != n_steps {
            return Err(Error::DimensionMismatch {
                what,
                expected: n_steps,
                got: self.n_steps(),
            });
        }
        if self.dim() != dim {
            return Err(Error::DimensionMismatch {
                what,
                expected: dim,
                got: self.dim(),
            });
        }
        if let ControlPath::Pathwise(a) = self {
            if a.len_of(Axis(0)) != n_paths {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: n_paths,
                    got: a.len_of(Axis(0)),
                });
            }
        }
        Ok(())
    }
}

/// Quadratic tracking cost
/// `J = 1/2 E int ||y - y_d||^2 + kappa1 ||u||^2 + kappa2 ||v||^2 dt`,
/// with left-endpoint quadrature in time.
#[derive(Debug, Clone, PartialEq)]
pub struct CostConfig {
    /// `n_steps x N`; row `m` is the target on `[t_m, t_{m+1})`.
    pub y_d: Array2<f64>,
    pub kappa1: f64,
    pub kappa2: f64,
}

/// Everything that defines a controlled system on a fixed grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub space: SpectralSpace,
    pub noise: NoiseModel,
    pub grid: TimeGrid,
    /// Distributed control operator `B`, `N x N`.
    pub control_op: Array2<f64>,
    pub initial: Field,
    pub cost: CostConfig,
}

impl Problem {
    pub fn new(
        space: SpectralSpace,
        noise: NoiseModel,
        grid: TimeGrid,
        control_op: Array2<f64>,
        initial: Field,
        cost: CostConfig,
    ) -> Result<Self> {
        let n = space.n_modes();
        if noise.n_modes() != n {
            return Err(Error::DimensionMismatch {
                what: "noise model modes",
                expected: n,
                got: noise.n_modes(),
            });
        }
        if control_op.dim() != (n, n) {
            return Err(Error::DimensionMismatch {
                what: "control operator",
                expected: n,
                got: control_op.nrows(),
            });
        }
        space.check_field(&initial)?;
        if cost.y_d.dim() != (grid.n_steps, n) {
            return Err(Error::DimensionMismatch {
                what: "target rows",
                expected: grid.n_steps,
                got: cost.y_d.nrows(),
            });
        }
        if !(cost.kappa1 > 0.0 && cost.kappa1.is_finite()) {
            return Err(Error::config("cost.kappa1", "must be positive"));
        }
        if !(cost.kappa2 > 0.0 && cost.kappa2.is_finite()) {
            return Err(Error::config("cost.kappa2", "must be positive"));
        }
        noise.check_step(grid.dt())?;
        Ok(Self {
            space,
            noise,
            grid,
            control_op,
            initial,
            cost,
        })
    }

    pub fn n_modes(&self) -> usize {
        self.space.n_modes()
    }

    pub fn zero_u(&self) -> ControlPath {
        ControlPath::zeros(self.grid.n_steps, self.n_modes())
    }

    pub fn zero_v(&self) -> ControlPath {
        ControlPath::zeros(self.grid.n_steps, self.space.boundary_dim())
    }

    pub fn with_cost(&self, cost: CostConfig) -> Result<Self> {
        Self::new(
            self.space.clone(),
            self.noise.clone(),
            self.grid,
            self.control_op.clone(),
            self.initial.clone(),
            cost,
        )
    }
}

/// Samples `M x (n_steps + 1) x N` of a state-like process, with the noise
/// that drove it.
#[derive(Debug, Clone)]
pub struct TrajectoryEnsemble {
    pub states: Array3<f64>,
    pub noise: Arc<NoiseEnsemble>,
    pub grid: TimeGrid,
}

impl TrajectoryEnsemble {
    pub fn n_paths(&self) -> usize {
        self.states.len_of(Axis(0))
    }

    pub fn n_modes(&self) -> usize {
        self.states.len_of(Axis(2))
    }

    /// Sample mean over paths, `(n_steps + 1) x N`.
    pub fn mean(&self) -> Array2<f64> {
        mean_over_paths(&self.states)
    }

    /// Unbiased sample variance over paths, `(n_steps + 1) x N`.
    pub fn variance(&self) -> Array2<f64> {
        let mean = self.mean();
        let m = self.n_paths();
        let (_, s, n) = self.states.dim();
        let mut var = Array2::zeros((s, n));
        if m < 2 {
            return var;
        }
        for p in 0..m {
            let d = &self.states.index_axis(Axis(0), p) - &mean;
            var += &(&d * &d);
        }
        var / (m - 1) as f64
    }
}

pub(crate) fn mean_over_paths(a: &Array3<f64>) -> Array2<f64> {
    let m = a.len_of(Axis(0));
    let mut acc = Array2::zeros((a.len_of(Axis(1)), a.len_of(Axis(2))));
    for p in a.axis_iter(Axis(0)) {
        acc += &p;
    }
    acc / m as f64
}

/// Per-mode coefficients of one exponential Euler step.
#[derive(Debug, Clone)]
pub(crate) struct StepOperator {
    pub decay: Array1<f64>,
    pub noise_factor: Array1<f64>,
    /// Weight of the tracking residual in the adjoint driver.
    pub driver_weight: Array1<f64>,
    /// `A^{-1}(I - e^{-A dt}) R B`.
    pub u_gain: Array2<f64>,
    /// `(I - e^{-A dt}) R D`.
    pub v_gain: Array2<f64>,
}

impl StepOperator {
    pub fn new(problem: &Problem, regularization: Option<f64>) -> Result<Self> {
        let sp = &problem.space;
        let dt = problem.grid.dt();
        let n = sp.n_modes();
        let r = match regularization {
            Some(l) => resolvent_factors(sp, l)?,
            None => Array1::ones(n),
        };
        let decay = sp.eigenvalues().mapv(|l| (-l * dt).exp());
        let mut u_gain = problem.control_op.clone();
        let mut v_gain = sp.lift().clone();
        for k in 0..n {
            let l = sp.eigenvalues()[k];
            let e = -(-l * dt).exp_m1();
            u_gain.row_mut(k).mapv_inplace(|b| b * r[k] * e / l);
            v_gain.row_mut(k).mapv_inplace(|d| d * r[k] * e);
        }
        Ok(Self {
            decay,
            noise_factor: r.mapv(|x| x * x),
            driver_weight: r,
            u_gain,
            v_gain,
        })
    }
}

/// Runs the scheme from `initial` with inputs `u`, `v` over every path of
/// `noise`.
pub(crate) fn propagate(
    problem: &Problem,
    op: &StepOperator,
    initial: &Field,
    u: &ControlPath,
    v: &ControlPath,
    noise: &Arc<NoiseEnsemble>,
) -> Result<TrajectoryEnsemble> {
    let n = problem.n_modes();
    let steps = problem.grid.n_steps;
    let m = noise.n_paths();
    if noise.n_steps() != steps {
        return Err(Error::DimensionMismatch {
            what: "noise ensemble steps",
            expected: steps,
            got: noise.n_steps(),
        });
    }
    if noise.n_noise() != problem.noise.n_noise() {
        return Err(Error::DimensionMismatch {
            what: "noise ensemble modes",
            expected: problem.noise.n_noise(),
            got: noise.n_noise(),
        });
    }
    if (noise.dt - problem.grid.dt()).abs() > 1e-12 * problem.grid.dt() {
        return Err(Error::config("ensemble", "noise step differs from grid step"));
    }
    u.check("distributed control", steps, n, m)?;
    v.check("boundary control", steps, problem.space.boundary_dim(), m)?;

    let shared_input = match (u, v) {
        (ControlPath::Deterministic(ua), ControlPath::Deterministic(va)) => {
            Some(ua.dot(&op.u_gain.t()) + va.dot(&op.v_gain.t()))
        }
        _ => None,
    };

    let mut states = Array3::zeros((m, steps + 1, n));
    states
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(noise.increments.axis_iter(Axis(0)))
        .enumerate()
        .for_each(|(p, (mut traj, dw))| {
            let mut xi = vec![0.0; n];
            let mut y = initial.coeffs.clone();
            traj.row_mut(0).assign(&y);
            let mut input = Array1::zeros(n);
            for step in 0..steps {
                problem.noise.effective_increment(dw.row(step), &mut xi);
                match &shared_input {
                    Some(b) => input.assign(&b.row(step)),
                    None => {
                        input.assign(&op.u_gain.dot(&u.at(p, step)));
                        input += &op.v_gain.dot(&v.at(p, step));
                    }
                }
                for k in 0..n {
                    y[k] = op.decay[k] * (y[k] + op.noise_factor[k] * y[k] * xi[k]) + input[k];
                }
                traj.row_mut(step + 1).assign(&y);
            }
        });
    Ok(TrajectoryEnsemble {
        states,
        noise: Arc::clone(noise),
        grid: problem.grid,
    })
}

/// State `y` driven by `u`, `v` from the problem's initial condition.
pub fn simulate_state(
    problem: &Problem,
    u: &ControlPath,
    v: &BoundaryControlPath,
    noise: &Arc<NoiseEnsemble>,
) -> Result<TrajectoryEnsemble> {
    let op = StepOperator::new(problem, None)?;
    propagate(problem, &op, &problem.initial, u, v, noise)
}

/// Derivative `z1 = y'(u) u_tilde`: zero initial data, input `B u_tilde`.
pub fn simulate_z1(
    problem: &Problem,
    u_tilde: &ControlPath,
    noise: &Arc<NoiseEnsemble>,
) -> Result<TrajectoryEnsemble> {
    let op = StepOperator::new(problem, None)?;
    let zero = Field::zeros(problem.n_modes());
    propagate(problem, &op, &zero, u_tilde, &problem.zero_v(), noise)
}

/// Derivative `z2 = y'(v) v_tilde`: zero initial data, input `A D v_tilde`.
pub fn simulate_z2(
    problem: &Problem,
    v_tilde: &BoundaryControlPath,
    noise: &Arc<NoiseEnsemble>,
) -> Result<TrajectoryEnsemble> {
    let op = StepOperator::new(problem, None)?;
    let zero = Field::zeros(problem.n_modes());
    propagate(problem, &op, &zero, &problem.zero_u(), v_tilde, noise)
}

/// Sample average of the discretized cost.
pub fn evaluate_cost(
    problem: &Problem,
    state: &TrajectoryEnsemble,
    u: &ControlPath,
    v: &BoundaryControlPath,
) -> Result<f64> {
    let steps = problem.grid.n_steps;
    let m = state.n_paths();
    if state.states.len_of(Axis(1)) != steps + 1 || state.n_modes() != problem.n_modes() {
        return Err(Error::DimensionMismatch {
            what: "state ensemble shape",
            expected: steps + 1,
            got: state.states.len_of(Axis(1)),
        });
    }
    u.check("distributed control", steps, problem.n_modes(), m)?;
    v.check("boundary control", steps, problem.space.boundary_dim(), m)?;
    let dt = problem.grid.dt();
    let yd = &problem.cost.y_d;
    let tracking = ordered_mean(m, |p| {
        let traj = state.states.index_axis(Axis(0), p);
        let mut s = 0.0;
        for step in 0..steps {
            s += traj
                .row(step)
                .iter()
                .zip(yd.row(step).iter())
                .map(|(a, b)| sq(a - b))
                .sum::<f64>();
        }
        s * dt
    });
    let cu = problem.cost.kappa1 * u.inner(u, dt);
    let cv = problem.cost.kappa2 * v.inner(v, dt);
    Ok(0.5 * (tracking + cu + cv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::EnsembleSpec;

    fn problem(gamma: f64, n: usize, steps: usize) -> Problem {
        let space = SpectralSpace::power_law(n, 1.0, 2.0, 0.26, n).unwrap();
        let noise = NoiseModel::power_law(n, n, 1.0, -2.0, gamma).unwrap();
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let init = Field::new(Array1::from_iter((1..=n).map(|k| 1.0 / k as f64)));
        let cost = CostConfig {
            y_d: Array2::zeros((steps, n)),
            kappa1: 1.0,
            kappa2: 1.0,
        };
        Problem::new(space, noise, grid, Array2::eye(n), init, cost).unwrap()
    }

    #[test]
    fn uncontrolled_noiseless_is_exact_semigroup() {
        let pr = problem(0.0, 4, 64);
        let noise = Arc::new(NoiseEnsemble::sample(&pr.noise, 64, pr.grid.dt(), &EnsembleSpec::new(2, 1)).unwrap());
        let y = simulate_state(&pr, &pr.zero_u(), &pr.zero_v(), &noise).unwrap();
        for k in 0..4 {
            let l = ((k + 1) * (k + 1)) as f64;
            let exact = (-l).exp() / (k + 1) as f64;
            let got = y.states[[1, 64, k]];
            assert!((got - exact).abs() <= 1e-12 * exact.abs().max(1e-300) + 1e-300);
        }
    }

    #[test]
    fn constant_control_matches_duhamel() {
        let pr = problem(0.0, 3, 32);
        let noise = Arc::new(NoiseEnsemble::sample(&pr.noise, 32, pr.grid.dt(), &EnsembleSpec::new(1, 1)).unwrap());
        let u = ControlPath::Deterministic(Array2::ones((32, 3)));
        let y = simulate_state(&pr, &u, &pr.zero_v(), &noise).unwrap();
        for k in 0..3 {
            let l = ((k + 1) * (k + 1)) as f64;
            let exact = (-l).exp() / (k + 1) as f64 + (1.0 - (-l).exp()) / l;
            assert!((y.states[[0, 32, k]] - exact).abs() < 1e-13);
        }
    }

    #[test]
    fn cost_of_zero_state_is_control_energy() {
        let mut pr = problem(0.0, 2, 8);
        pr.initial = Field::zeros(2);
        let noise = Arc::new(NoiseEnsemble::sample(&pr.noise, 8, pr.grid.dt(), &EnsembleSpec::new(1, 1)).unwrap());
        let u = ControlPath::zeros(8, 2);
        let v = ControlPath::zeros(8, 2);
        let y = simulate_state(&pr, &u, &v, &noise).unwrap();
        assert_eq!(evaluate_cost(&pr, &y, &u, &v).unwrap(), 0.0);
    }

    #[test]
    fn pathwise_control_with_wrong_path_count_is_rejected() {
        let pr = problem(0.5, 2, 8);
        let noise = Arc::new(NoiseEnsemble::sample(&pr.noise, 8, pr.grid.dt(), &EnsembleSpec::new(3, 1)).unwrap());
        let u = ControlPath::Pathwise(Array3::zeros((2, 8, 2)));
        assert!(simulate_state(&pr, &u, &pr.zero_v(), &noise).is_err());
    }
}
