//! Gradients, the duality identities and both optimizers.

use std::sync::Arc;

use ndarray::{Array2, Array3};
use spde_control::control::{relative_gap, scaled_residual};
use spde_control::experiment::{optimizer_options, probe_directions, Setup};
use spde_control::*;

fn cfg(overrides: &[&str]) -> ExperimentConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::load(None, &o).unwrap()
}

fn setup(overrides: &[&str]) -> (ExperimentConfig, Problem, Arc<NoiseEnsemble>) {
    let c = cfg(overrides);
    let s = Setup::new(&c).unwrap();
    let noise = s.noise().unwrap();
    (c, s.problem, noise)
}

fn det(a: &ControlPath) -> &Array2<f64> {
    match a {
        ControlPath::Deterministic(a) => a,
        ControlPath::Pathwise(_) => panic!("expected a deterministic control"),
    }
}

fn max_abs2(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

const ZERO_GRADIENT: &[&str] = &["noise.gamma=0", "cost.target=uncontrolled-mean", "ensemble.n_paths=8", "grid.n_steps=64"];
const SMALL: &[&str] = &["ensemble.n_paths=256", "grid.n_steps=128"];
const METHOD: AdjointMethod = AdjointMethod::Regression(RegressionOptions {
    basis: RegressionBasis::Affine,
    target: RegressionTarget::Realized,
    keep_pathwise: false,
});

#[test]
fn zero_gradient_start() {
    let (c, pr, noise) = setup(ZERO_GRADIENT);
    let g = compute_gradient(&pr, &pr.zero_u(), &pr.zero_v(), c.alpha, &noise, &METHOD).unwrap();
    assert!(max_abs2(det(&g.grad_u)) < 1e-14 && max_abs2(det(&g.grad_v)) < 1e-14);
    let frozen = NoiseStrategy::Frozen(Arc::clone(&noise));
    let opts = optimizer_options(&c);
    let p = optimize_picard(&pr, &pr.zero_u(), &pr.zero_v(), c.alpha, &frozen, &opts).unwrap();
    assert!(p.converged && p.iterations <= 1);
    assert!(max_abs2(det(&p.final_u)) < 1e-14);
    let d = optimize_gradient_descent(&pr, &pr.zero_u(), &pr.zero_v(), c.alpha, &frozen, &opts).unwrap();
    assert!(d.converged);
    assert_eq!(d.iterations, 0);
}

#[test]
fn alpha_range_is_enforced() {
    let (_, pr, noise) = setup(ZERO_GRADIENT);
    for a in [0.0, 0.25, -0.1, 0.3] {
        assert!(matches!(
            compute_gradient(&pr, &pr.zero_u(), &pr.zero_v(), a, &noise, &METHOD),
            Err(Error::InvalidConfig { .. })
        ));
    }
}

#[test]
fn boundary_gradient_does_not_depend_on_alpha() {
    let (_, pr, noise) = setup(SMALL);
    let (u, v) = probe_directions(&pr, 3, 0);
    let reference = compute_gradient(&pr, &u, &v, 0.125, &noise, &METHOD).unwrap();
    let scale = max_abs2(det(&reference.grad_v));
    for a in [0.05, 0.2] {
        let g = compute_gradient(&pr, &u, &v, a, &noise, &METHOD).unwrap();
        let d = max_abs2(&(det(&g.grad_v) - det(&reference.grad_v)));
        assert!(d <= 1e-12 * scale, "alpha {a}: {d}");
        assert_eq!(g.grad_u, reference.grad_u);
    }
}

#[test]
fn scalar_noiseless_gradient_matches_finite_differences() {
    let (c, pr, noise) = setup(&[
        "space.n_modes=1",
        "space.boundary_dim=1",
        "noise.n_noise=1",
        "noise.gamma=0",
        "ensemble.n_paths=2",
    ]);
    let steps = pr.grid.n_steps;
    let dt = pr.grid.dt();
    let u = ControlPath::Deterministic(Array2::from_shape_fn((steps, 1), |(m, _)| (m as f64 * dt * 3.0).sin()));
    let v = ControlPath::Deterministic(Array2::from_elem((steps, 1), 0.3));
    let du = ControlPath::Deterministic(Array2::from_shape_fn((steps, 1), |(m, _)| 1.0 + m as f64 * dt));
    let g = compute_gradient(&pr, &u, &v, c.alpha, &noise, &METHOD).unwrap();
    let cost = |u: &ControlPath, v: &ControlPath| {
        let y = simulate_state(&pr, u, v, &noise).unwrap();
        evaluate_cost(&pr, &y, u, v).unwrap()
    };
    let eps = 1e-5;
    let fd_u = (cost(&u.axpy(eps, &du).unwrap(), &v) - cost(&u.axpy(-eps, &du).unwrap(), &v)) / (2.0 * eps);
    assert!(relative_gap(fd_u, g.grad_u.inner(&du, dt)) < 1e-6);
    let fd_v = (cost(&u, &v.axpy(eps, &du).unwrap()) - cost(&u, &v.axpy(-eps, &du).unwrap())) / (2.0 * eps);
    assert!(relative_gap(fd_v, g.grad_v.inner(&du, dt)) < 1e-6);
}

#[test]
fn duality_with_zero_direction_is_trivial() {
    let (c, pr, noise) = setup(SMALL);
    let (u, v) = probe_directions(&pr, 3, 1);
    let r = duality_check(&pr, &u, &v, &pr.zero_u(), &pr.zero_v(), c.alpha, &noise, &METHOD).unwrap();
    assert_eq!((r.lhs1, r.rhs1, r.lhs2, r.rhs2), (0.0, 0.0, 0.0, 0.0));
}

#[test]
fn duality_holds_for_state_feedback_directions() {
    let (c, pr, noise) = setup(SMALL);
    // State feedback on the uncontrolled path is adapted and lies in the
    // span of the affine regression basis, so the projection loses nothing.
    let y = simulate_state(&pr, &pr.zero_u(), &pr.zero_v(), &noise).unwrap();
    let steps = pr.grid.n_steps;
    let ut = Array3::from_shape_fn((256, steps, 16), |(p, m, k)| (k as f64).cos() + 0.5 * y.states[[p, m, k]]);
    let ut = ControlPath::Pathwise(ut);
    let opts = RegressionOptions { keep_pathwise: true, ..Default::default() };
    let r = duality_check(&pr, &pr.zero_u(), &pr.zero_v(), &ut, &pr.zero_v(), c.alpha, &noise, &AdjointMethod::Regression(opts))
        .unwrap();
    assert!(r.gap1 < 1e-12, "{r:?}");
    let g = compute_gradient(&pr, &ut, &pr.zero_v(), c.alpha, &noise, &AdjointMethod::Regression(opts)).unwrap();
    assert!(matches!(g.grad_u, ControlPath::Pathwise(_)));
}

#[test]
fn affine_and_regression_gradients_agree() {
    let (c, pr, noise) = setup(&["ensemble.n_paths=2048", "grid.n_steps=256"]);
    let (u, v) = probe_directions(&pr, 3, 0);
    let a = compute_gradient(&pr, &u, &v, c.alpha, &noise, &AdjointMethod::Affine(AffineScheme::ContinuousRk4 { substeps: 4 })).unwrap();
    let r = compute_gradient(&pr, &u, &v, c.alpha, &noise, &METHOD).unwrap();
    let gap = max_abs2(&(det(&a.grad_u) - det(&r.grad_u))) / max_abs2(det(&a.grad_u));
    assert!(gap < 0.05, "{gap}");
}

#[test]
fn picard_contracts_and_satisfies_the_optimality_system() {
    let (c, pr, noise) = setup(&["ensemble.n_paths=512", "grid.n_steps=256", "solver.tolerance=1e-9"]);
    let frozen = NoiseStrategy::Frozen(Arc::clone(&noise));
    let opts = optimizer_options(&c);
    let rep = optimize_picard(&pr, &pr.zero_u(), &pr.zero_v(), c.alpha, &frozen, &opts).unwrap();
    assert!(rep.converged);
    for w in rep.residuals.windows(2) {
        assert!(w[1] < w[0], "{:?}", rep.residuals);
    }
    // Fixed point: u + B^T z*/kappa1 = grad_u / kappa1.
    let g = compute_gradient(&pr, &rep.final_u, &rep.final_v, c.alpha, &noise, &METHOD).unwrap();
    let (r, _, _) = scaled_residual(&g, &rep.final_u, &rep.final_v, pr.grid.dt());
    assert!(r <= 1e-9);

    // Strict convexity: no random two-sided perturbation lowers the cost.
    let dt = pr.grid.dt();
    let cost = |u: &ControlPath| {
        let y = simulate_state(&pr, u, &rep.final_v, &noise).unwrap();
        evaluate_cost(&pr, &y, u, &rep.final_v).unwrap()
    };
    let j = cost(&rep.final_u);
    for i in 0..10 {
        let (d, _) = probe_directions(&pr, 11, i);
        let d = d.scale(1e-2 / d.norm(dt));
        for s in [1.0, -1.0] {
            assert!(cost(&rep.final_u.axpy(s, &d).unwrap()) >= j * (1.0 - 1e-14), "direction {i}");
        }
    }
}

#[test]
fn optimizers_agree_in_the_noiseless_case() {
    let (c, pr, noise) = setup(&[
        "noise.gamma=0",
        "ensemble.n_paths=2",
        "grid.n_steps=256",
        "space.n_modes=4",
        "space.boundary_dim=4",
        "noise.n_noise=4",
        "solver.tolerance=1e-10",
        "solver.max_iter=500",
    ]);
    let frozen = NoiseStrategy::Frozen(Arc::clone(&noise));
    let opts = optimizer_options(&c);
    let p = optimize_picard(&pr, &pr.zero_u(), &pr.zero_v(), c.alpha, &frozen, &opts).unwrap();
    let d = optimize_gradient_descent(&pr, &pr.zero_u(), &pr.zero_v(), c.alpha, &frozen, &opts).unwrap();
    assert!(p.converged && d.converged);
    let scale = max_abs2(det(&p.final_u)).max(max_abs2(det(&p.final_v)));
    assert!(max_abs2(&(det(&p.final_u) - det(&d.final_u))) <= 1e-4 * scale);
    assert!(max_abs2(&(det(&p.final_v) - det(&d.final_v))) <= 1e-4 * scale);
    assert!(d.final_cost() <= d.costs[0]);
    for w in d.costs.windows(2) {
        assert!(w[1] <= w[0]);
    }
}

#[test]
fn heavier_control_weight_gives_smaller_controls() {
    let mut norms = Vec::new();
    for k in ["cost.kappa1=1", "cost.kappa1=10"] {
        let (c, pr, noise) = setup(&["ensemble.n_paths=256", "grid.n_steps=128", k]);
        let frozen = NoiseStrategy::Frozen(Arc::clone(&noise));
        let rep = optimize_picard(&pr, &pr.zero_u(), &pr.zero_v(), c.alpha, &frozen, &optimizer_options(&c)).unwrap();
        assert!(rep.converged);
        norms.push(rep.final_u.norm(pr.grid.dt()));
    }
    assert!(norms[1] < norms[0], "{norms:?}");
}

#[test]
fn non_convergence_is_reported_not_raised() {
    let (c, pr, noise) = setup(&["ensemble.n_paths=64", "grid.n_steps=64", "solver.max_iter=1"]);
    let frozen = NoiseStrategy::Frozen(Arc::clone(&noise));
    let rep = optimize_picard(&pr, &pr.zero_u(), &pr.zero_v(), c.alpha, &frozen, &optimizer_options(&c)).unwrap();
    assert!(!rep.converged);
    assert_eq!(rep.iterations, 1);
    assert_eq!(rep.costs.len(), 2);
    let bad = OptimizerOptions { damping: 0.0, ..optimizer_options(&c) };
    assert!(optimize_picard(&pr, &pr.zero_u(), &pr.zero_v(), c.alpha, &frozen, &bad).is_err());
}

#[test]
fn resampled_optimization_is_reproducible() {
    let (c, pr, _) = setup(&["ensemble.n_paths=64", "grid.n_steps=64", "solver.max_iter=5"]);
    let strat = NoiseStrategy::Resample(EnsembleSpec::new(64, 9));
    let opts = optimizer_options(&c);
    let a = optimize_picard(&pr, &pr.zero_u(), &pr.zero_v(), c.alpha, &strat, &opts).unwrap();
    let b = optimize_picard(&pr, &pr.zero_u(), &pr.zero_v(), c.alpha, &strat, &opts).unwrap();
    assert_eq!(a.costs, b.costs);
    assert_eq!(a.final_u, b.final_u);
    assert!(a.costs.len() >= 2);
}
