//! Small least-squares fits over path samples, solved through normal
//! equations on standardized regressors.

use nalgebra::{DMatrix, DVector};

/// Regressors as columns over paths.
pub(crate) struct Design {
    cols: Vec<Vec<f64>>,
}

impl Design {
    pub fn new() -> Self {
        Self { cols: Vec::new() }
    }

    pub fn push(&mut self, col: Vec<f64>) {
        self.cols.push(col);
    }

    pub fn len(&self) -> usize {
        self.cols.len()
    }

    pub fn col(&self, i: usize) -> &[f64] {
        &self.cols[i]
    }

    /// Least-squares coefficients for each target, or `None` when the Gram
    /// matrix is not numerically positive definite.
    pub fn fit(&self, targets: &[&[f64]]) -> Option<Vec<Vec<f64>>> {
        let p = self.cols.len();
        let m = self.cols[0].len();
        let mut g = DMatrix::<f64>::zeros(p, p);
        for i in 0..p {
            for j in 0..=i {
                let s: f64 = self.cols[i].iter().zip(&self.cols[j]).map(|(a, b)| a * b).sum();
                g[(i, j)] = s / m as f64;
                g[(j, i)] = s / m as f64;
            }
        }
        let maxd = (0..p).map(|i| g[(i, i)]).fold(0.0f64, f64::max);
        let chol = g.clone().cholesky()?;
        let l = chol.l();
        let mind = (0..p).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
        if !(mind > 1e-12 * maxd) {
            return None;
        }
        Some(
            targets
                .iter()
                .map(|t| {
                    let rhs = DVector::from_iterator(
                        p,
                        (0..p).map(|i| {
                            self.cols[i].iter().zip(t.iter()).map(|(a, b)| a * b).sum::<f64>()
                                / m as f64
                        }),
                    );
                    chol.solve(&rhs).iter().copied().collect()
                })
                .collect(),
        )
    }

    /// Fitted values `sum_i c_i col_i` at every path.
    pub fn eval(&self, coef: &[f64], cols: std::ops::Range<usize>) -> Vec<f64> {
        let m = self.cols[0].len();
        let mut out = vec![0.0; m];
        for (c, i) in coef.iter().zip(cols) {
            for (o, x) in out.iter_mut().zip(&self.cols[i]) {
                *o += c * x;
            }
        }
        out
    }
}

/// `(x - mean) / sd`, or `None` if the sample has no spread.
pub(crate) fn standardize(x: &[f64]) -> Option<Vec<f64>> {
    let m = x.len() as f64;
    let mean = x.iter().sum::<f64>() / m;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
    let sd = var.sqrt();
    let scale = mean.abs().max(sd);
    if !(sd > 1e-12 * scale) || !sd.is_finite() {
        return None;
    }
    Some(x.iter().map(|v| (v - mean) / sd).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_affine_relation() {
        let x: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 3.0 * v).collect();
        let mut d = Design::new();
        d.push(vec![1.0; 20]);
        d.push(x.clone());
        let c = d.fit(&[&y]).unwrap();
        assert!((c[0][0] - 2.0).abs() < 1e-12 && (c[0][1] + 3.0).abs() < 1e-12);
        let fit = d.eval(&c[0], 0..2);
        assert!(fit.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn collinear_design_rejected() {
        let mut d = Design::new();
        d.push(vec![1.0; 5]);
        d.push(vec![2.0; 5]);
        assert!(d.fit(&[&[1.0; 5]]).is_none());
    }

    #[test]
    fn constant_column_has_no_spread() {
        assert!(standardize(&[3.0; 4]).is_none());
        assert!(standardize(&[1.0, 2.0]).is_some());
    }
}
