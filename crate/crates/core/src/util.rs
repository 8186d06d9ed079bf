use rayon::prelude::*;

/// Mean of `f(p)` over `p in 0..n`; evaluated in parallel, summed in index
/// order so the result does not depend on the thread count.
pub(crate) fn ordered_mean<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let vals: Vec<f64> = (0..n).into_par_iter().map(f).collect();
    vals.iter().sum::<f64>() / n as f64
}

/// `phi_1(x) = (1 - e^{-x}) / x`, with `phi_1(0) = 1`.
pub(crate) fn phi1(x: f64) -> f64 {
    if x.abs() < 1e-300 {
        1.0
    } else {
        -(-x).exp_m1() / x
    }
}

pub(crate) fn sq(v: f64) -> f64 {
    v * v
}
