//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use spde_control::experiment::Setup;
use spde_control::{ExperimentConfig, NoiseEnsemble, Problem};

/// Default problem on `steps` intervals with a frozen `paths`-path ensemble.
pub fn fixture(steps: usize, paths: usize) -> (Problem, Arc<NoiseEnsemble>) {
    let o = vec![format!("grid.n_steps={steps}"), format!("ensemble.n_paths={paths}")];
    let setup = Setup::new(&ExperimentConfig::load(None, &o).expect("valid overrides")).expect("valid problem");
    let noise = setup.noise().expect("ensemble");
    (setup.problem, noise)
}
