//! Experiment configuration: a JSON document with defaults for every field,
//! dotted-path overrides, validation and a content hash.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::adjoint::{RegressionBasis, RegressionOptions, RegressionTarget};
use crate::error::{Error, Result};
use crate::forward::{CostConfig, Problem, TimeGrid};
use crate::noise::{Coupling, NoiseModel};
use crate::spectral::{Field, SpectralSpace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpaceSpec {
    pub n_modes: usize,
    /// `lambda_k = eigenvalue_scale * k^eigenvalue_exponent`
    pub eigenvalue_scale: f64,
    pub eigenvalue_exponent: f64,
    pub lift_decay: f64,
    pub boundary_dim: usize,
}

impl Default for SpaceSpec {
    fn default() -> Self {
        Self {
            n_modes: 16,
            eigenvalue_scale: 1.0,
            eigenvalue_exponent: 2.0,
            lift_decay: 0.26,
            boundary_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub n_noise: usize,
    /// `mu_j = q_scale * j^q_exponent`
    pub q_scale: f64,
    pub q_exponent: f64,
    /// Constant diagonal coupling, unless `gamma_values` or `coupling_matrix` is set.
    pub gamma: f64,
    pub gamma_values: Option<Vec<f64>>,
    /// Dense `N x K` coupling.
    pub coupling_matrix: Option<Vec<Vec<f64>>>,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            n_noise: 16,
            q_scale: 1.0,
            q_exponent: -2.0,
            gamma: 0.5,
            gamma_values: None,
            coupling_matrix: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub horizon: f64,
    pub n_steps: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            n_steps: 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetPreset {
    Zero,
    /// Mean of the uncontrolled discrete state.
    UncontrolledMean,
    /// `amplitude * sin(pi t / T)` in one mode.
    SingleModeSine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostSpec {
    pub kappa1: f64,
    pub kappa2: f64,
    pub target: TargetPreset,
    pub target_amplitude: f64,
    pub target_mode: usize,
}

impl Default for CostSpec {
    fn default() -> Self {
        Self {
            kappa1: 1.0,
            kappa2: 1.0,
            target: TargetPreset::SingleModeSine,
            target_amplitude: 1.0,
            target_mode: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialPreset {
    /// `xi_k = scale / k`
    InverseMode,
    /// `xi = scale e_1`
    UnitFirstMode,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialSpec {
    pub kind: InitialPreset,
    pub scale: f64,
}

impl Default for InitialSpec {
    fn default() -> Self {
        Self {
            kind: InitialPreset::InverseMode,
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub n_paths: usize,
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_paths: 2048,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisName {
    Affine,
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetName {
    Realized,
    Fitted,
}

impl From<TargetName> for RegressionTarget {
    fn from(t: TargetName) -> Self {
        match t {
            TargetName::Realized => RegressionTarget::Realized,
            TargetName::Fitted => RegressionTarget::Fitted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSpec {
    pub basis: BasisName,
    pub target: TargetName,
    pub damping: f64,
    pub tolerance: f64,
    pub max_iter: usize,
    pub initial_step: f64,
    /// Redraw the noise at every optimizer iteration instead of freezing it.
    pub resample: bool,
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            basis: BasisName::Affine,
            target: TargetName::Realized,
            damping: 0.5,
            tolerance: 1e-6,
            max_iter: 200,
            initial_step: 1.0,
            resample: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySpec {
    pub duality_tol: f64,
    /// Defaults to 1e-6 for noiseless configurations and 1e-3 otherwise.
    pub gradient_tol: Option<f64>,
    pub fd_step: f64,
    pub n_directions: usize,
    pub linearity_tol: f64,
    pub backward_tol: f64,
    pub backward_target: TargetName,
    pub rk4_substeps: usize,
    pub sigma_band: f64,
    pub ito_lambda: f64,
    pub direction_seed: u64,
}

impl Default for VerifySpec {
    fn default() -> Self {
        Self {
            duality_tol: 1e-2,
            gradient_tol: None,
            fd_step: 1e-5,
            n_directions: 3,
            linearity_tol: 1e-12,
            backward_tol: 2e-2,
            backward_target: TargetName::Fitted,
            rk4_substeps: 4,
            sigma_band: 3.0,
            ito_lambda: 100.0,
            direction_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub lambdas: Vec<f64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            lambdas: vec![10.0, 100.0, 1000.0, 10000.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub dir: String,
    /// Also write the regression adjoint from `simulate`.
    pub write_adjoint: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: "out".into(),
            write_adjoint: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub space: SpaceSpec,
    pub noise: NoiseSpec,
    pub grid: GridSpec,
    pub cost: CostSpec,
    pub initial: InitialSpec,
    pub ensemble: EnsembleConfig,
    pub alpha: f64,
    pub solver: SolverSpec,
    pub verify: VerifySpec,
    pub sweep: SweepSpec,
    pub output: OutputSpec,
}

impl ExperimentConfig {
    pub fn default_config() -> Self {
        Self {
            alpha: 0.125,
            ..Default::default()
        }
    }

    /// Parses a JSON document over the defaults, then applies `key=value`
    /// overrides addressed by dotted paths. Values are read as JSON when
    /// they parse, otherwise as strings.
    pub fn load(json: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(Self::default_config()).expect("serializable");
        if let Some(text) = json {
            let user: Value = serde_json::from_str(text)
                .map_err(|e| Error::config("<config>", format!("malformed JSON: {e}")))?;
            merge(&mut doc, user, "")?;
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o.clone(), "override must look like key=value"))?;
            let val: Value =
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key, val)?;
        }
        let cfg: Self = serde_path_to_error::deserialize(doc).map_err(|e| {
            let field = e.path().to_string();
            Error::config(field, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |f: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(f, format!("must be positive, got {v}")))
            }
        };
        if self.space.n_modes == 0 {
            return Err(Error::config("space.n_modes", "must be at least 1"));
        }
        if self.space.boundary_dim == 0 {
            return Err(Error::config("space.boundary_dim", "must be at least 1"));
        }
        pos("space.eigenvalue_scale", self.space.eigenvalue_scale)?;
        pos("cost.kappa1", self.cost.kappa1)?;
        pos("cost.kappa2", self.cost.kappa2)?;
        pos("grid.horizon", self.grid.horizon)?;
        pos("noise.q_scale", self.noise.q_scale)?;
        pos("solver.tolerance", self.solver.tolerance)?;
        pos("solver.initial_step", self.solver.initial_step)?;
        pos("verify.fd_step", self.verify.fd_step)?;
        pos("verify.ito_lambda", self.verify.ito_lambda)?;
        if !(self.alpha > 0.0 && self.alpha < 0.25) {
            return Err(Error::config("alpha", format!("must lie in (0, 1/4), got {}", self.alpha)));
        }
        if !(self.solver.damping > 0.0 && self.solver.damping <= 1.0) {
            return Err(Error::config("solver.damping", "must lie in (0, 1]"));
        }
        if self.ensemble.n_paths == 0 {
            return Err(Error::config("ensemble.n_paths", "must be at least 1"));
        }
        if self.grid.n_steps < 2 {
            return Err(Error::config("grid.n_steps", "must be at least 2"));
        }
        if self.cost.target_mode >= self.space.n_modes {
            return Err(Error::config("cost.target_mode", "exceeds the number of modes"));
        }
        if self.verify.n_directions == 0 {
            return Err(Error::config("verify.n_directions", "must be at least 1"));
        }
        self.problem()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, with the output location cleared.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output.dir = String::new();
        let text = serde_json::to_string(&c).expect("serializable");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn space(&self) -> Result<SpectralSpace> {
        let s = &self.space;
        SpectralSpace::power_law(
            s.n_modes,
            s.eigenvalue_scale,
            s.eigenvalue_exponent,
            s.lift_decay,
            s.boundary_dim,
        )
    }

    pub fn noise_model(&self) -> Result<NoiseModel> {
        let n = self.space.n_modes;
        let ns = &self.noise;
        let k = ns.n_noise;
        let q = Array1::from_iter((1..=k).map(|j| ns.q_scale * (j as f64).powf(ns.q_exponent)));
        let coupling = if let Some(m) = &ns.coupling_matrix {
            if ns.gamma_values.is_some() {
                return Err(Error::config(
                    "noise.coupling_matrix",
                    "cannot be combined with noise.gamma_values",
                ));
            }
            if m.len() != n || m.iter().any(|r| r.len() != k) {
                return Err(Error::config(
                    "noise.coupling_matrix",
                    format!("must be {n} x {k}"),
                ));
            }
            Coupling::Dense(Array2::from_shape_fn((n, k), |(a, b)| m[a][b]))
        } else if let Some(g) = &ns.gamma_values {
            if g.len() != k {
                return Err(Error::config("noise.gamma_values", format!("must have length {k}")));
            }
            Coupling::Diagonal(Array1::from_vec(g.clone()))
        } else {
            Coupling::Diagonal(Array1::from_elem(k, ns.gamma))
        };
        NoiseModel::new(n, q, coupling)
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.horizon, self.grid.n_steps)
    }

    pub fn initial(&self) -> Field {
        let n = self.space.n_modes;
        let s = self.initial.scale;
        match self.initial.kind {
            InitialPreset::InverseMode => {
                Field::new(Array1::from_iter((1..=n).map(|k| s / k as f64)))
            }
            InitialPreset::UnitFirstMode => {
                let mut f = Field::zeros(n);
                f.coeffs[0] = s;
                f
            }
            InitialPreset::Zero => Field::zeros(n),
        }
    }

    pub fn target(&self, space: &SpectralSpace, grid: &TimeGrid, initial: &Field) -> Array2<f64> {
        let n = space.n_modes();
        let mut yd = Array2::zeros((grid.n_steps, n));
        match self.cost.target {
            TargetPreset::Zero => {}
            TargetPreset::UncontrolledMean => {
                let dt = grid.dt();
                for k in 0..n {
                    let a = (-space.eigenvalues()[k] * dt).exp();
                    let mut v = initial.coeffs[k];
                    for m in 0..grid.n_steps {
                        yd[[m, k]] = v;
                        v *= a;
                    }
                }
            }
            TargetPreset::SingleModeSine => {
                let k = self.cost.target_mode;
                for m in 0..grid.n_steps {
                    yd[[m, k]] = self.cost.target_amplitude
                        * (std::f64::consts::PI * grid.time(m) / grid.horizon).sin();
                }
            }
        }
        yd
    }

    pub fn problem(&self) -> Result<Problem> {
        let space = self.space()?;
        let noise = self.noise_model()?;
        let grid = self.grid()?;
        let initial = self.initial();
        let yd = self.target(&space, &grid, &initial);
        let n = space.n_modes();
        Problem::new(
            space,
            noise,
            grid,
            Array2::eye(n),
            initial,
            CostConfig {
                y_d: yd,
                kappa1: self.cost.kappa1,
                kappa2: self.cost.kappa2,
            },
        )
    }

    pub fn regression_options(&self) -> RegressionOptions {
        RegressionOptions {
            basis: match self.solver.basis {
                BasisName::Affine => RegressionBasis::Affine,
                BasisName::Quadratic => RegressionBasis::Quadratic,
            },
            target: self.solver.target.into(),
            keep_pathwise: false,
        }
    }
}

fn merge(base: &mut Value, user: Value, path: &str) -> Result<()> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() => merge(slot, v, &p)?,
                    Some(slot) => *slot = v,
                    None => return Err(Error::config(p, "unknown field")),
                }
            }
            Ok(())
        }
        (b, u) => {
            *b = u;
            Ok(())
        }
    }
}

fn set_path(doc: &mut Value, key: &str, val: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(key, "path descends into a non-object"))?;
        if !obj.contains_key(*part) {
            return Err(Error::config(key, "unknown field"));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), val);
            return Ok(());
        }
        cur = obj.get_mut(*part).expect("checked");
    }
    Err(Error::config(key, "empty key"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = ExperimentConfig::load(None, &[]).unwrap();
        assert_eq!(c.space.n_modes, 16);
        assert_eq!(c.ensemble.seed, 42);
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn overrides_apply_and_change_hash() {
        let a = ExperimentConfig::load(None, &[]).unwrap();
        let b = ExperimentConfig::load(None, &["grid.n_steps=256".into(), "cost.target=zero".into()]).unwrap();
        assert_eq!(b.grid.n_steps, 256);
        assert_eq!(b.cost.target, TargetPreset::Zero);
        assert_ne!(a.hash(), b.hash());
        let c = ExperimentConfig::load(None, &["output.dir=elsewhere".into()]).unwrap();
        assert_eq!(a.hash(), c.hash());
    }

    #[test]
    fn field_level_errors() {
        match ExperimentConfig::load(None, &["grid.nsteps=3".into()]) {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "grid.nsteps"),
            other => panic!("{other:?}"),
        }
        match ExperimentConfig::load(None, &["cost.kappa1=-1".into()]) {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "cost.kappa1"),
            other => panic!("{other:?}"),
        }
        match ExperimentConfig::load(Some(r#"{"space": {"n_mode": 3}}"#), &[]) {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "space.n_mode"),
            other => panic!("{other:?}"),
        }
        match ExperimentConfig::load(None, &["grid.n_steps=many".into()]) {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "grid.n_steps"),
            other => panic!("{other:?}"),
        }
        assert!(ExperimentConfig::load(None, &["alpha=0.3".into()]).is_err());
    }

    #[test]
    fn uncontrolled_mean_target_is_discrete_decay() {
        let c = ExperimentConfig::load(None, &["cost.target=uncontrolled-mean".into(), "grid.n_steps=8".into()]).unwrap();
        let p = c.problem().unwrap();
        let a = (-4.0f64 / 8.0).exp();
        assert!((p.cost.y_d[[3, 1]] - 0.5 * a.powi(3)).abs() < 1e-15);
    }
}
