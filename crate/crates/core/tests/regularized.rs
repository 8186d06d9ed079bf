//! Resolvent-regularized systems: the large-lambda limit, closed forms,
//! strong-form residuals and the convergence sweep.

use std::sync::Arc;

use ndarray::{Array2, Array3};
use spde_control::experiment::{probe_directions, standardized_mean, sup_relative_gap, Setup};
use spde_control::regularized::{
    backward_strong_residual, ito_product_residuals, simulate_regularized_forward, solve_regularized_backward,
    strong_residual,
};
use spde_control::*;

fn setup(overrides: &[&str]) -> (Problem, Arc<NoiseEnsemble>) {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    let s = Setup::new(&ExperimentConfig::load(None, &o).unwrap()).unwrap();
    let noise = s.noise().unwrap();
    (s.problem, noise)
}

fn max_abs(a: &Array3<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

const SMALL: &[&str] = &["ensemble.n_paths=64", "grid.n_steps=128"];

#[test]
fn huge_lambda_recovers_the_unregularized_sensitivities() {
    let (pr, noise) = setup(SMALL);
    let (ut, vt) = probe_directions(&pr, 7, 0);
    let z1 = simulate_z1(&pr, &ut, &noise).unwrap();
    let r1 = simulate_regularized_forward(&pr, 1e12, ForwardInput::Distributed(&ut), &noise).unwrap();
    assert!(max_abs(&(&z1.states - &r1.states)) <= 1e-8 * max_abs(&z1.states));
    let z2 = simulate_z2(&pr, &vt, &noise).unwrap();
    let r2 = simulate_regularized_forward(&pr, 1e12, ForwardInput::Boundary(&vt), &noise).unwrap();
    assert!(max_abs(&(&z2.states - &r2.states)) <= 1e-8 * max_abs(&z2.states));

    let zero = simulate_regularized_forward(&pr, 10.0, ForwardInput::Distributed(&pr.zero_u()), &noise).unwrap();
    assert_eq!(max_abs(&zero.states), 0.0);
    assert!(simulate_regularized_forward(&pr, -1.0, ForwardInput::Distributed(&ut), &noise).is_err());
}

#[test]
fn scalar_closed_form_with_resolvent_factor() {
    let (pr, noise) = setup(&[
        "space.n_modes=1",
        "space.boundary_dim=1",
        "noise.n_noise=1",
        "noise.gamma=0",
        "space.eigenvalue_scale=3",
        "ensemble.n_paths=2",
    ]);
    let steps = pr.grid.n_steps;
    let (l1, lam, b) = (3.0f64, 10.0, 0.7);
    let u = ControlPath::Deterministic(Array2::from_elem((steps, 1), b));
    let z = simulate_regularized_forward(&pr, lam, ForwardInput::Distributed(&u), &noise).unwrap();
    let exact = lam / (lam + l1) * b * (1.0 - (-l1).exp()) / l1;
    assert!((z.states[[0, steps, 0]] - exact).abs() < 1e-13);
}

#[test]
fn strong_residual_examples() {
    let (pr, noise) = setup(SMALL);
    let zero = simulate_regularized_forward(&pr, 100.0, ForwardInput::Distributed(&pr.zero_u()), &noise).unwrap();
    assert_eq!(strong_residual(&pr, &zero, ForwardInput::Distributed(&pr.zero_u()), Some(100.0)).unwrap(), 0.0);

    // Noiseless, constant control: the residual is the left-point quadrature error, O(dt).
    for steps in [256usize, 1024] {
        let (pr, noise) = setup(&["noise.gamma=0", "ensemble.n_paths=2", &format!("grid.n_steps={steps}")]);
        let u = ControlPath::Deterministic(Array2::from_elem((steps, 16), 1.0));
        let z = simulate_regularized_forward(&pr, 100.0, ForwardInput::Distributed(&u), &noise).unwrap();
        let r = strong_residual(&pr, &z, ForwardInput::Distributed(&u), Some(100.0)).unwrap();
        assert!(r < 10.0 * pr.grid.dt(), "steps {steps}: {r}");
    }

    let bad = ControlPath::Deterministic(Array2::zeros((127, 16)));
    assert!(strong_residual(&pr, &zero, ForwardInput::Distributed(&bad), Some(100.0)).is_err());
}

#[test]
fn strong_residual_shrinks_under_refinement() {
    let mut res = Vec::new();
    for steps in [128usize, 512] {
        let (pr, noise) = setup(&["ensemble.n_paths=64", &format!("grid.n_steps={steps}")]);
        let u = ControlPath::Deterministic(Array2::from_shape_fn((steps, 16), |(m, k)| {
            (std::f64::consts::PI * m as f64 / steps as f64 + k as f64).cos()
        }));
        let z = simulate_regularized_forward(&pr, 100.0, ForwardInput::Distributed(&u), &noise).unwrap();
        res.push(strong_residual(&pr, &z, ForwardInput::Distributed(&u), Some(100.0)).unwrap());
    }
    assert!(res[0] / res[1] >= 2.0, "{res:?}");
}

#[test]
fn regularized_backward_limits() {
    let (pr, noise) = setup(&["ensemble.n_paths=512", "grid.n_steps=128"]);
    let y = simulate_state(&pr, &pr.zero_u(), &pr.zero_v(), &noise).unwrap();
    let opts = RegressionOptions::default();
    let base = solve_regression(&pr, &y, &opts).unwrap();
    let big = solve_regularized_backward(&pr, 1e12, &y, &opts).unwrap();
    assert!(sup_relative_gap(&big.zstar, &base.zstar) < 1e-6);
    assert!(backward_strong_residual(&pr, &y, &big).unwrap().is_finite());

    let (pr0, noise0) = setup(&["noise.gamma=0", "cost.target=uncontrolled-mean", "ensemble.n_paths=16"]);
    let y0 = simulate_state(&pr0, &pr0.zero_u(), &pr0.zero_v(), &noise0).unwrap();
    let z0 = solve_regularized_backward(&pr0, 50.0, &y0, &opts).unwrap();
    assert!(max_abs(&z0.zstar) < 1e-14);
}

#[test]
fn noiseless_regularized_backward_matches_modified_oracle() {
    let (pr, noise) = setup(&["noise.gamma=0", "ensemble.n_paths=16", "grid.n_steps=256"]);
    let y = simulate_state(&pr, &pr.zero_u(), &pr.zero_v(), &noise).unwrap();
    for lam in [10.0, 1000.0] {
        let reg = solve_regularized_backward(&pr, lam, &y, &RegressionOptions::default()).unwrap();
        let aff = solve_affine(&pr, &pr.zero_u(), &pr.zero_v(), AffineScheme::GridConsistent, Some(lam))
            .unwrap()
            .evaluate(&y, false)
            .unwrap();
        let gap = max_abs(&(&reg.zstar - &aff.zstar)) / max_abs(&aff.zstar);
        assert!(gap < 1e-8, "lambda {lam}: {gap}");
    }
}

#[test]
fn sweep_gaps_decrease_with_lambda() {
    let (pr, noise) = setup(&["ensemble.n_paths=256", "grid.n_steps=256"]);
    let (ut, vt) = probe_directions(&pr, 7, 0);
    let opts = RegressionOptions::default();
    let lambdas: Vec<f64> = (0..8).map(|i| 10.0 * 2f64.powi(i)).collect();
    let sw = run_sweep(&pr, &pr.zero_u(), &pr.zero_v(), &ut, &vt, &lambdas, &noise, &opts).unwrap();
    for w in sw.errors_forward_u.windows(2) {
        assert!(w[1] <= w[0], "{:?}", sw.errors_forward_u);
    }
    let sw = run_sweep(&pr, &pr.zero_u(), &pr.zero_v(), &ut, &vt, &[10.0, 1000.0], &noise, &opts).unwrap();
    for col in [&sw.errors_forward_u, &sw.errors_forward_v, &sw.errors_backward_z, &sw.errors_backward_phi] {
        assert!(col[1] < col[0], "{col:?}");
    }
    let one = run_sweep(&pr, &pr.zero_u(), &pr.zero_v(), &ut, &vt, &[100.0], &noise, &opts).unwrap();
    assert_eq!(one.lambdas.len(), 1);
    assert_eq!(one.errors_backward_phi.len(), 1);
    for bad in [vec![], vec![100.0, 10.0], vec![10.0, 10.0]] {
        assert!(matches!(
            run_sweep(&pr, &pr.zero_u(), &pr.zero_v(), &ut, &vt, &bad, &noise, &opts),
            Err(Error::InvalidConfig { .. })
        ));
    }
}

#[test]
fn ito_product_residual_has_mean_zero() {
    let (pr, noise) = setup(&["ensemble.n_paths=2048", "grid.n_steps=256"]);
    let (ut, vt) = probe_directions(&pr, 7, 0);
    let x1 = simulate_regularized_forward(&pr, 100.0, ForwardInput::Distributed(&ut), &noise).unwrap();
    let x2 = simulate_regularized_forward(&pr, 100.0, ForwardInput::Boundary(&vt), &noise).unwrap();
    let r = ito_product_residuals(
        &pr,
        100.0,
        (&x1, ForwardInput::Distributed(&ut)),
        (&x2, ForwardInput::Boundary(&vt)),
    )
    .unwrap();
    assert_eq!(r.len(), 2048);
    let z = standardized_mean(&r);
    assert!(z.abs() < 3.0, "{z}");
}
