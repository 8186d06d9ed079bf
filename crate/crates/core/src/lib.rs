//! Spectral-Galerkin solvers for the controlled stochastic Stokes equation
//! with multiplicative Q-Wiener noise, its backward adjoint equation and the
//! resulting first-order optimality system.

pub mod adjoint;
pub mod config;
pub mod control;
pub mod error;
pub mod experiment;
pub mod forward;
pub mod io;
pub mod noise;
mod regression;
pub mod regularized;
pub mod spectral;
mod util;

pub use adjoint::{
    adjoint_regularity_norm, solve_affine, solve_regression, AdjointPair, AffineRepresentation,
    AffineScheme, RegressionBasis, RegressionOptions, RegressionTarget,
};
pub use control::{
    compute_gradient, duality_check, optimize_gradient_descent, optimize_picard, AdjointMethod,
    DualityReport, GradientPair, NoiseStrategy, OptimizationReport, OptimizerOptions,
};
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use experiment::{Check, Method, Verdict};
pub use forward::{
    evaluate_cost, simulate_state, simulate_z1, simulate_z2, BoundaryControlPath, ControlPath,
    CostConfig, Problem, TimeGrid, TrajectoryEnsemble,
};
pub use noise::{Coupling, EnsembleSpec, HsMatrix, NoiseEnsemble, NoiseModel, WienerPath};
pub use regularized::{run_sweep, ForwardInput, RegularizationSweep};
pub use spectral::{Field, QuadratureSpec, SpectralSpace};
