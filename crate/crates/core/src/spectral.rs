//! Diagonal spectral calculus for the Stokes operator on a truncated
//! eigenbasis.
//!
//! Fields are stored as coefficient vectors in the orthonormal eigenbasis of
//! `A`, so every function of `A` acts mode by mode. The boundary lift `D` is a
//! dense `N x N_b` matrix mapping boundary coefficients to interior modes.

use ndarray::{Array1, Array2, ArrayView1};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};

/// Truncated spectral representation of `A` and the Dirichlet lift `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSpace {
    eigenvalues: Array1<f64>,
    lift: Array2<f64>,
    lift_decay: f64,
}

impl SpectralSpace {
    pub fn new(eigenvalues: Array1<f64>, lift: Array2<f64>, lift_decay: f64) -> Result<Self> {
        let n = eigenvalues.len();
        if n == 0 {
            return Err(Error::config("space.n_modes", "must be at least 1"));
        }
        for (k, &l) in eigenvalues.iter().enumerate() {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::config(
                    "space.eigenvalues",
                    format!("eigenvalue {k} must be positive and finite, got {l}"),
                ));
            }
            if k > 0 && l < eigenvalues[k - 1] {
                return Err(Error::config(
                    "space.eigenvalues",
                    format!("eigenvalues must be nondecreasing (mode {k})"),
                ));
            }
        }
        if lift.nrows() != n {
            return Err(Error::DimensionMismatch {
                what: "lift rows",
                expected: n,
                got: lift.nrows(),
            });
        }
        if lift.ncols() == 0 {
            return Err(Error::config("space.boundary_dim", "must be at least 1"));
        }
        if lift.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("space.lift", "entries must be finite"));
        }
        if !(lift_decay.is_finite() && lift_decay > 0.25 && lift_decay < 0.5) {
            return Err(Error::config(
                "space.lift_decay",
                format!("must lie in (1/4, 1/2), got {lift_decay}"),
            ));
        }
        Ok(Self {
            eigenvalues,
            lift,
            lift_decay,
        })
    }

    /// `lambda_k = scale * k^exponent`, and a diagonal lift with entries
    /// `lambda_k^{-lift_decay}` on the first `min(N, N_b)` modes.
    pub fn power_law(
        n_modes: usize,
        scale: f64,
        exponent: f64,
        lift_decay: f64,
        boundary_dim: usize,
    ) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::config("space.eigenvalue_scale", "must be positive"));
        }
        if !(exponent.is_finite() && exponent >= 0.0) {
            return Err(Error::config("space.eigenvalue_exponent", "must be nonnegative"));
        }
        let eig = Array1::from_iter((1..=n_modes).map(|k| scale * (k as f64).powf(exponent)));
        let mut lift = Array2::zeros((n_modes, boundary_dim));
        for k in 0..n_modes.min(boundary_dim) {
            lift[[k, k]] = eig[k].powf(-lift_decay);
        }
        Self::new(eig, lift, lift_decay)
    }

    pub fn n_modes(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn boundary_dim(&self) -> usize {
        self.lift.ncols()
    }

    pub fn eigenvalues(&self) -> &Array1<f64> {
        &self.eigenvalues
    }

    pub fn lift(&self) -> &Array2<f64> {
        &self.lift
    }

    pub fn lift_decay(&self) -> f64 {
        self.lift_decay
    }

    /// `A^s D` as an `N x N_b` matrix.
    pub fn weighted_lift(&self, s: f64) -> Array2<f64> {
        let mut m = self.lift.clone();
        for (mut row, &l) in m.rows_mut().into_iter().zip(self.eigenvalues.iter()) {
            row *= l.powf(s);
        }
        m
    }

    pub(crate) fn check_field(&self, x: &Field) -> Result<()> {
        if x.len() != self.n_modes() {
            return Err(Error::DimensionMismatch {
                what: "field modes",
                expected: self.n_modes(),
                got: x.len(),
            });
        }
        Ok(())
    }
}

/// Coefficients of a divergence-free field in the eigenbasis of `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub coeffs: Array1<f64>,
}

impl Field {
    pub fn new(coeffs: Array1<f64>) -> Self {
        Self { coeffs }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            coeffs: Array1::zeros(n),
        }
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        Self {
            coeffs: Array1::from_vec(v),
        }
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.coeffs.view()
    }

    pub fn dot(&self, other: &Field) -> f64 {
        self.coeffs.dot(&other.coeffs)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

/// `A^s x` for any real `s`.
pub fn apply_fractional(space: &SpectralSpace, s: f64, x: &Field) -> Result<Field> {
    space.check_field(x)?;
    if !s.is_finite() {
        return Err(Error::config("exponent", "must be finite"));
    }
    Ok(Field::new(
        space
            .eigenvalues
            .iter()
            .zip(x.coeffs.iter())
            .map(|(&l, &c)| l.powf(s) * c)
            .collect(),
    ))
}

/// `e^{-tA} x`.
pub fn apply_semigroup(space: &SpectralSpace, t: f64, x: &Field) -> Result<Field> {
    space.check_field(x)?;
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::config("t", format!("semigroup time must be >= 0, got {t}")));
    }
    Ok(Field::new(
        space
            .eigenvalues
            .iter()
            .zip(x.coeffs.iter())
            .map(|(&l, &c)| (-t * l).exp() * c)
            .collect(),
    ))
}

/// `lambda (lambda + A)^{-1} x`.
pub fn apply_resolvent(space: &SpectralSpace, lambda: f64, x: &Field) -> Result<Field> {
    space.check_field(x)?;
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::config("lambda", format!("must be positive, got {lambda}")));
    }
    Ok(Field::new(
        space
            .eigenvalues
            .iter()
            .zip(x.coeffs.iter())
            .map(|(&l, &c)| lambda / (lambda + l) * c)
            .collect(),
    ))
}

/// Per-mode resolvent factors `lambda / (lambda + lambda_k)`.
pub fn resolvent_factors(space: &SpectralSpace, lambda: f64) -> Result<Array1<f64>> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::config("lambda", format!("must be positive, got {lambda}")));
    }
    Ok(space.eigenvalues.mapv(|l| lambda / (lambda + l)))
}

/// `D g` for boundary data `g`.
pub fn dirichlet_lift(space: &SpectralSpace, g: ArrayView1<'_, f64>) -> Result<Field> {
    if g.len() != space.boundary_dim() {
        return Err(Error::DimensionMismatch {
            what: "boundary data",
            expected: space.boundary_dim(),
            got: g.len(),
        });
    }
    Ok(Field::new(space.lift.dot(&g)))
}

/// `D^T x`.
pub fn dirichlet_lift_adjoint(space: &SpectralSpace, x: &Field) -> Result<Array1<f64>> {
    space.check_field(x)?;
    Ok(space.lift.t().dot(&x.coeffs))
}

/// `sup_{k,j} lambda_k^beta |D_kj|`, bounded uniformly in the truncation for
/// `beta <= lift_decay`.
pub fn lift_bound(space: &SpectralSpace, beta: f64) -> f64 {
    space
        .weighted_lift(beta)
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
}

/// `||A^alpha x|| = sqrt(sum_k lambda_k^{2 alpha} x_k^2)`.
pub fn fractional_norm(space: &SpectralSpace, alpha: f64, x: &Field) -> Result<f64> {
    Ok(apply_fractional(space, alpha, x)?.norm())
}

/// Composite Gauss-Legendre rule for the substitution `t = e^s` in the
/// gamma-function representation of negative fractional powers.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureSpec {
    pub s_min: f64,
    pub s_max: f64,
    pub panels: usize,
    pub points_per_panel: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            s_min: -30.0,
            s_max: 5.0,
            panels: 50,
            points_per_panel: 8,
        }
    }
}

impl QuadratureSpec {
    pub fn n_nodes(&self) -> usize {
        self.panels * self.points_per_panel
    }
}

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for j in 2..=n {
                let jf = j as f64;
                let p2 = ((2.0 * jf - 1.0) * x * p1 - (jf - 1.0) * p0) / jf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = nf * (x * pn - pm) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// `A^{-alpha} x` from `Gamma(alpha)^{-1} int_0^inf t^{alpha-1} e^{-tA} x dt`,
/// evaluated by quadrature in `s = ln t`. The part of the integral below
/// `s_min` is added from its convergent series.
pub fn fractional_via_gamma(
    space: &SpectralSpace,
    alpha: f64,
    x: &Field,
    quad: &QuadratureSpec,
) -> Result<Field> {
    space.check_field(x)?;
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::config("alpha", format!("must be positive, got {alpha}")));
    }
    if quad.n_nodes() < 16 || quad.s_min >= quad.s_max {
        return Err(Error::config(
            "quadrature",
            "needs at least 16 nodes on a nonempty interval",
        ));
    }
    let lmin = space.eigenvalues[0];
    if lmin * quad.s_max.exp() < 40.0 {
        return Err(Error::Unsupported(format!(
            "upper quadrature limit too small for smallest eigenvalue {lmin}"
        )));
    }
    let (gn, gw) = gauss_legendre(quad.points_per_panel);
    let h = (quad.s_max - quad.s_min) / quad.panels as f64;
    let g = gamma(alpha);
    let coeffs = space
        .eigenvalues
        .iter()
        .zip(x.coeffs.iter())
        .map(|(&l, &c)| {
            let mut acc = 0.0;
            for p in 0..quad.panels {
                let mid = quad.s_min + (p as f64 + 0.5) * h;
                for (&xi, &wi) in gn.iter().zip(gw.iter()) {
                    let s = mid + 0.5 * h * xi;
                    acc += 0.5 * h * wi * (alpha * s - l * s.exp()).exp();
                }
            }
            let mut term = 1.0;
            for n in 0..8 {
                let nf = n as f64;
                if n > 0 {
                    term *= -l / nf;
                }
                acc += term * ((alpha + nf) * quad.s_min).exp() / (alpha + nf);
            }
            acc / g * c
        })
        .collect();
    Ok(Field::new(coeffs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_space() -> SpectralSpace {
        SpectralSpace::power_law(16, 1.0, 2.0, 0.26, 16).unwrap()
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(8);
        let s: f64 = w.iter().sum();
        assert!((s - 2.0).abs() < 1e-14);
        let i14: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(14)).sum();
        assert!((i14 - 2.0 / 15.0).abs() < 1e-14);
        let (x3, _) = gauss_legendre(3);
        assert!((x3[2] - (0.6f64).sqrt()).abs() < 1e-15);
        assert_eq!(x3[1], 0.0);
    }

    #[test]
    fn powers_and_semigroup_examples() {
        let sp = default_space();
        let mut e = Field::zeros(16);
        e.coeffs[2] = 1.0;
        let y = apply_fractional(&sp, 0.5, &e).unwrap();
        assert_eq!(y.coeffs[2], 3.0);
        let y = apply_semigroup(&sp, 0.01, &e).unwrap();
        assert!((y.coeffs[2] - (-0.09f64).exp()).abs() < 1e-15);
        let y = apply_resolvent(&sp, 9.0, &e).unwrap();
        assert!((y.coeffs[2] - 0.5).abs() < 1e-15);
        assert!(apply_semigroup(&sp, -1.0, &e).is_err());
        assert!(apply_resolvent(&sp, 0.0, &e).is_err());
    }

    #[test]
    fn lift_bound_uniform_below_decay() {
        let small = SpectralSpace::power_law(16, 1.0, 2.0, 0.26, 16).unwrap();
        let big = SpectralSpace::power_law(2048, 1.0, 2.0, 0.26, 2048).unwrap();
        assert_eq!(lift_bound(&small, 0.24), 1.0);
        assert_eq!(lift_bound(&big, 0.24), 1.0);
        assert!(lift_bound(&big, 0.45) > 10.0);
        let v = Array1::from_elem(16, 1.0);
        let y = apply_fractional(&small, 0.24, &dirichlet_lift(&small, v.view()).unwrap()).unwrap();
        assert!(y.norm() <= lift_bound(&small, 0.24) * v.dot(&v).sqrt() + 1e-12);
    }

    #[test]
    fn gamma_quadrature_matches_power() {
        let sp = default_space();
        let x = Field::new(Array1::from_iter((1..=16).map(|k| 1.0 / k as f64)));
        for &a in &[0.1, 0.25, 0.5, 0.9, 1.0] {
            let q = fractional_via_gamma(&sp, a, &x, &QuadratureSpec::default()).unwrap();
            let e = apply_fractional(&sp, -a, &x).unwrap();
            let num: f64 = (&q.coeffs - &e.coeffs).mapv(|v| v * v).sum().sqrt();
            assert!(num / e.norm() < 1e-8, "alpha {a}: {}", num / e.norm());
        }
    }

    #[test]
    fn rejects_bad_spaces() {
        assert!(SpectralSpace::power_law(0, 1.0, 2.0, 0.26, 4).is_err());
        assert!(SpectralSpace::power_law(4, 1.0, 2.0, 0.2, 4).is_err());
        let eig = Array1::from_vec(vec![2.0, 1.0]);
        assert!(SpectralSpace::new(eig, Array2::zeros((2, 2)), 0.3).is_err());
    }
}
