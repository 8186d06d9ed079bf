//! Q-Wiener noise, the multiplicative noise operator `G` and its adjoint.
//!
//! `Q` is diagonal in the noise basis with eigenvalues `mu_j`. The noise acts
//! on mode `k` of the state through a coupling matrix `C` (`N x K`):
//! `G(y) e_j = sum_k C_kj y_k e_k`. The Hilbert-Schmidt space `L_2^0` carries
//! the inner product `<Phi, Psi> = sum_j mu_j sum_k Phi_kj Psi_kj`, and `G^*`
//! is the adjoint of `y -> G(y)` with respect to it.
//!
//! Gaussian draws are addressed by `(seed, path, step, noise mode)` through a
//! ChaCha8 stream per path, so any ensemble can be regenerated lazily and is
//! independent of thread count.

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::spectral::Field;

#[derive(Debug, Clone, PartialEq)]
pub enum Coupling {
    /// `C_kj = gamma_j` when `k == j`, zero otherwise.
    Diagonal(Array1<f64>),
    /// Full `N x K` coupling matrix.
    Dense(Array2<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    n_modes: usize,
    q: Array1<f64>,
    coupling: Coupling,
    variance: Array1<f64>,
}

impl NoiseModel {
    pub fn new(n_modes: usize, q: Array1<f64>, coupling: Coupling) -> Result<Self> {
        let k = q.len();
        if k == 0 {
            return Err(Error::config("noise.n_noise", "must be at least 1"));
        }
        if k > n_modes {
            return Err(Error::config(
                "noise.n_noise",
                format!("K = {k} exceeds the number of state modes {n_modes}"),
            ));
        }
        if let Some(j) = q.iter().position(|&m| !(m.is_finite() && m > 0.0)) {
            return Err(Error::config(
                "noise.q",
                format!("eigenvalue {j} must be positive and finite"),
            ));
        }
        match &coupling {
            Coupling::Diagonal(g) => {
                if g.len() != k {
                    return Err(Error::DimensionMismatch {
                        what: "diagonal coupling",
                        expected: k,
                        got: g.len(),
                    });
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::config("noise.coupling", "entries must be finite"));
                }
            }
            Coupling::Dense(c) => {
                if c.dim() != (n_modes, k) {
                    return Err(Error::DimensionMismatch {
                        what: "dense coupling rows",
                        expected: n_modes,
                        got: c.nrows(),
                    });
                }
                if c.iter().any(|v| !v.is_finite()) {
                    return Err(Error::config("noise.coupling", "entries must be finite"));
                }
            }
        }
        let mut variance = Array1::zeros(n_modes);
        for kk in 0..n_modes {
            variance[kk] = (0..k)
                .map(|j| {
                    let c = coupling_entry(&coupling, kk, j);
                    c * c * q[j]
                })
                .sum();
        }
        Ok(Self {
            n_modes,
            q,
            coupling,
            variance,
        })
    }

    /// `mu_j = q_scale * j^q_exponent` with a constant diagonal coupling.
    pub fn power_law(
        n_modes: usize,
        n_noise: usize,
        q_scale: f64,
        q_exponent: f64,
        gamma: f64,
    ) -> Result<Self> {
        let q = Array1::from_iter((1..=n_noise).map(|j| q_scale * (j as f64).powf(q_exponent)));
        Self::new(n_modes, q, Coupling::Diagonal(Array1::from_elem(n_noise, gamma)))
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn n_noise(&self) -> usize {
        self.q.len()
    }

    pub fn q(&self) -> &Array1<f64> {
        &self.q
    }

    /// `Tr Q = sum_j mu_j`.
    pub fn trace(&self) -> f64 {
        self.q.sum()
    }

    pub fn coupling(&self) -> &Coupling {
        &self.coupling
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self.coupling, Coupling::Diagonal(_))
    }

    pub fn entry(&self, k: usize, j: usize) -> f64 {
        coupling_entry(&self.coupling, k, j)
    }

    /// `s_k = sum_j C_kj^2 mu_j`, the variance rate of the noise seen by mode `k`.
    pub fn effective_variance(&self) -> &Array1<f64> {
        &self.variance
    }

    pub fn is_deterministic(&self) -> bool {
        self.variance.iter().all(|&s| s == 0.0)
    }

    /// `xi_k = sum_j C_kj dW_j`.
    pub fn effective_increment(&self, dw: ArrayView1<'_, f64>, out: &mut [f64]) {
        match &self.coupling {
            Coupling::Diagonal(g) => {
                out.iter_mut().for_each(|v| *v = 0.0);
                for j in 0..g.len().min(self.n_modes) {
                    out[j] = g[j] * dw[j];
                }
            }
            Coupling::Dense(c) => {
                for (k, o) in out.iter_mut().enumerate() {
                    *o = c.row(k).dot(&dw);
                }
            }
        }
    }

    /// Rejects step sizes with `dt * s_k > 1` for some mode.
    pub fn check_step(&self, dt: f64) -> Result<()> {
        for (k, &s) in self.variance.iter().enumerate() {
            if dt * s > 1.0 {
                return Err(Error::StabilityViolation {
                    mode: k,
                    dt,
                    product: dt * s,
                });
            }
        }
        Ok(())
    }

    fn check_field(&self, y: &Field) -> Result<()> {
        if y.len() != self.n_modes {
            return Err(Error::DimensionMismatch {
                what: "field modes",
                expected: self.n_modes,
                got: y.len(),
            });
        }
        Ok(())
    }

    fn check_hs(&self, phi: &HsMatrix) -> Result<()> {
        if phi.entries.dim() != (self.n_modes, self.n_noise()) {
            return Err(Error::DimensionMismatch {
                what: "Hilbert-Schmidt operator shape",
                expected: self.n_modes * self.n_noise(),
                got: phi.entries.len(),
            });
        }
        Ok(())
    }
}

fn coupling_entry(c: &Coupling, k: usize, j: usize) -> f64 {
    match c {
        Coupling::Diagonal(g) => {
            if k == j {
                g[j]
            } else {
                0.0
            }
        }
        Coupling::Dense(m) => m[[k, j]],
    }
}

/// Matrix of an operator in `L_2^0`: row `k`, column `j` is `<Phi e_j, e_k>`.
#[derive(Debug, Clone, PartialEq)]
pub struct HsMatrix {
    pub entries: Array2<f64>,
}

impl HsMatrix {
    pub fn zeros(n_modes: usize, n_noise: usize) -> Self {
        Self {
            entries: Array2::zeros((n_modes, n_noise)),
        }
    }
}

pub fn apply_g(model: &NoiseModel, y: &Field) -> Result<HsMatrix> {
    model.check_field(y)?;
    let mut m = HsMatrix::zeros(model.n_modes, model.n_noise());
    for ((k, j), v) in m.entries.indexed_iter_mut() {
        *v = model.entry(k, j) * y.coeffs[k];
    }
    Ok(m)
}

pub fn apply_g_adjoint(model: &NoiseModel, phi: &HsMatrix) -> Result<Field> {
    model.check_hs(phi)?;
    let out = (0..model.n_modes)
        .map(|k| {
            (0..model.n_noise())
                .map(|j| model.q[j] * model.entry(k, j) * phi.entries[[k, j]])
                .sum()
        })
        .collect();
    Ok(Field::new(out))
}

pub fn hs_inner(model: &NoiseModel, a: &HsMatrix, b: &HsMatrix) -> Result<f64> {
    model.check_hs(a)?;
    model.check_hs(b)?;
    Ok(a.entries
        .axis_iter(Axis(1))
        .zip(b.entries.axis_iter(Axis(1)))
        .zip(model.q.iter())
        .map(|((ca, cb), &mu)| mu * ca.dot(&cb))
        .sum())
}

pub fn hs_norm_sq(model: &NoiseModel, a: &HsMatrix) -> Result<f64> {
    hs_inner(model, a, a)
}

/// Itô sum `sum_m Phi_m dW_m` of a piecewise constant integrand.
pub fn ito_quadrature(model: &NoiseModel, phi: &[HsMatrix], path: &WienerPath) -> Result<Field> {
    if phi.len() != path.n_steps() {
        return Err(Error::DimensionMismatch {
            what: "integrand steps",
            expected: path.n_steps(),
            got: phi.len(),
        });
    }
    let mut acc = Array1::zeros(model.n_modes);
    for (p, dw) in phi.iter().zip(path.increments.rows()) {
        model.check_hs(p)?;
        acc += &p.entries.dot(&dw);
    }
    Ok(Field::new(acc))
}

/// Standard normal draw number `index` of stream `path` under `seed`.
pub fn standard_normal(seed: u64, path: u64, index: u64) -> f64 {
    let mut s = NormalStream::new(seed, path);
    s.seek(index);
    s.next_normal()
}

/// Sequential reader over one path's counter-addressed normal draws.
pub struct NormalStream {
    rng: ChaCha8Rng,
}

impl NormalStream {
    pub fn new(seed: u64, path: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path);
        Self { rng }
    }

    /// Positions the stream so the next draw is draw number `index`.
    pub fn seek(&mut self, index: u64) {
        self.rng.set_word_pos(4 * index as u128);
    }

    pub fn next_normal(&mut self) -> f64 {
        let a = self.rng.next_u64();
        let b = self.rng.next_u64();
        let u1 = ((a >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
        let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Increments of one Wiener path on a uniform grid, `n_steps x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerPath {
    pub increments: Array2<f64>,
    pub dt: f64,
    pub seed: u64,
    pub path_id: u64,
}

impl WienerPath {
    pub fn n_steps(&self) -> usize {
        self.increments.nrows()
    }
}

fn fill_path(q: &Array1<f64>, dt: f64, seed: u64, path: u64, refine: usize, out: &mut ndarray::ArrayViewMut2<'_, f64>) {
    let k = q.len();
    let fine_dt = dt / refine as f64;
    let scale: Vec<f64> = q.iter().map(|&m| (m * fine_dt).sqrt()).collect();
    let mut s = NormalStream::new(seed, path);
    s.seek(0);
    for mut row in out.rows_mut() {
        row.fill(0.0);
        for _ in 0..refine {
            for j in 0..k {
                row[j] += scale[j] * s.next_normal();
            }
        }
    }
}

/// Path `path_id` of the increments `dW_{m,j} ~ N(0, mu_j dt)`.
pub fn sample_wiener(
    model: &NoiseModel,
    n_steps: usize,
    dt: f64,
    seed: u64,
    path_id: u64,
) -> Result<WienerPath> {
    sample_wiener_refined(model, n_steps, dt, seed, path_id, 1)
}

/// As [`sample_wiener`], with each increment the sum of `refine` increments
/// of the grid with step `dt / refine`. Paths at different refinements with
/// the same seed are samples of the same Brownian motion.
pub fn sample_wiener_refined(
    model: &NoiseModel,
    n_steps: usize,
    dt: f64,
    seed: u64,
    path_id: u64,
    refine: usize,
) -> Result<WienerPath> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::config("dt", "must be positive"));
    }
    if refine == 0 {
        return Err(Error::config("refine", "must be at least 1"));
    }
    let mut inc = Array2::zeros((n_steps, model.n_noise()));
    fill_path(&model.q, dt, seed, path_id, refine, &mut inc.view_mut());
    Ok(WienerPath {
        increments: inc,
        dt,
        seed,
        path_id,
    })
}

/// How an ensemble of Wiener paths is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnsembleSpec {
    pub n_paths: usize,
    pub seed: u64,
    /// Brownian increments are built from `refine` substeps of the
    /// generating grid; coarse grids with the same seed share the paths.
    pub refine: usize,
}

impl EnsembleSpec {
    pub fn new(n_paths: usize, seed: u64) -> Self {
        Self {
            n_paths,
            seed,
            refine: 1,
        }
    }
}

/// Increments for paths `0..M`, stored `M x n_steps x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseEnsemble {
    pub increments: Array3<f64>,
    pub dt: f64,
    pub seed: u64,
    pub refine: usize,
}

impl NoiseEnsemble {
    pub fn sample(model: &NoiseModel, n_steps: usize, dt: f64, spec: &EnsembleSpec) -> Result<Self> {
        Self::sample_range(model, n_steps, dt, spec, 0..spec.n_paths)
    }

    /// Paths `range` of the ensemble described by `spec`; path `p` of the
    /// result is path `range.start + p` of the full ensemble.
    pub fn sample_range(
        model: &NoiseModel,
        n_steps: usize,
        dt: f64,
        spec: &EnsembleSpec,
        range: std::ops::Range<usize>,
    ) -> Result<Self> {
        if range.is_empty() {
            return Err(Error::config("ensemble.n_paths", "must be at least 1"));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::config("dt", "must be positive"));
        }
        if spec.refine == 0 {
            return Err(Error::config("ensemble.refine", "must be at least 1"));
        }
        let start = range.start;
        let mut inc = Array3::zeros((range.len(), n_steps, model.n_noise()));
        inc.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(p, mut path)| {
                fill_path(&model.q, dt, spec.seed, (start + p) as u64, spec.refine, &mut path);
            });
        Ok(Self {
            increments: inc,
            dt,
            seed: spec.seed,
            refine: spec.refine,
        })
    }

    pub fn n_paths(&self) -> usize {
        self.increments.len_of(Axis(0))
    }

    pub fn n_steps(&self) -> usize {
        self.increments.len_of(Axis(1))
    }

    pub fn n_noise(&self) -> usize {
        self.increments.len_of(Axis(2))
    }

    pub fn path(&self, p: usize) -> WienerPath {
        WienerPath {
            increments: self.increments.index_axis(Axis(0), p).to_owned(),
            dt: self.dt,
            seed: self.seed,
            path_id: p as u64,
        }
    }

    /// Effective increments `xi_{p,m,k}` seen by each state mode.
    pub fn effective(&self, model: &NoiseModel) -> Array3<f64> {
        let (m, n, _) = self.increments.dim();
        let mut out = Array3::zeros((m, n, model.n_modes()));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(self.increments.axis_iter(Axis(0)))
            .for_each(|(mut o, dw)| {
                for (mut orow, drow) in o.rows_mut().into_iter().zip(dw.rows()) {
                    model.effective_increment(drow, orow.as_slice_mut().expect("contiguous"));
                }
            });
        out
    }
}
