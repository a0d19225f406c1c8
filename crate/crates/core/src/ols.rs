//! Weighted least squares through the SVD of the weighted design.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};

/// Reciprocal condition number below which a design counts as rank deficient.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OlsFit {
    pub coef: Vec<f64>,
    /// Classical standard errors, absent when there are no residual degrees of freedom.
    pub std_errors: Option<Vec<f64>>,
    pub residuals: Vec<f64>,
    /// Weighted residual sum of squares, weights normalized to sum to the row count.
    pub rss: f64,
}

pub fn ols(x: &DMatrix<f64>, y: &[f64]) -> Result<OlsFit> {
    weighted_ols(x, y, &alloc::vec![1.0; y.len()])
}

/// Minimizes `sum_i w_i (y_i - x_i' beta)^2`.
pub fn weighted_ols(x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Result<OlsFit> {
    let (n, p) = x.shape();
    if y.len() != n || w.len() != n {
        return Err(invalid!("design has {n} rows, response {}, weights {}", y.len(), w.len()));
    }
    if n < p || p == 0 {
        return Err(Error::RankDeficient(alloc::format!("{n} rows for {p} regressors")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(invalid!("non-finite regression input"));
    }
    let total: f64 = w.iter().sum();
    let f: Vec<f64> = w.iter().map(|v| v * n as f64 / total).collect();
    let mut xw = x.clone();
    let mut yw = DVector::from_column_slice(y);
    for i in 0..n {
        let s = libm::sqrt(f[i]);
        xw.row_mut(i).scale_mut(s);
        yw[i] *= s;
    }
    let svd = xw.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > RANK_TOL * smax) {
        return Err(Error::RankDeficient(alloc::format!(
            "singular values range from {smin:e} to {smax:e}"
        )));
    }
    let beta = svd.solve(&yw, 0.0).map_err(|e| Error::Numeric(e.into()))?;
    let residuals: Vec<f64> = (0..n).map(|i| y[i] - x.row(i).dot(&beta.transpose())).collect();
    let rss: f64 = residuals.iter().zip(&f).map(|(r, fi)| fi * r * r).sum();
    let std_errors = (n > p).then(|| {
        let s2 = rss / (n - p) as f64;
        let v = svd.v_t.as_ref().expect("requested").transpose();
        (0..p)
            .map(|k| {
                let var: f64 = (0..p).map(|j| libm::pow(v[(k, j)] / svd.singular_values[j], 2.0)).sum();
                libm::sqrt(s2 * var)
            })
            .collect()
    });
    Ok(OlsFit { coef: beta.iter().copied().collect(), std_errors, residuals, rss })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_fit_has_zero_residuals() {
        let x = DMatrix::from_fn(6, 3, |i, j| match j {
            0 => i as f64,
            1 => ((i * i) % 5) as f64,
            _ => 1.0,
        });
        let y: Vec<f64> = (0..6).map(|i| 0.3 * x[(i, 0)] + 0.7 * x[(i, 1)] + 2.0).collect();
        let fit = ols(&x, &y).unwrap();
        assert!((fit.coef[0] - 0.3).abs() < 1e-12);
        assert!((fit.coef[1] - 0.7).abs() < 1e-12);
        assert!((fit.coef[2] - 2.0).abs() < 1e-12);
        assert!(fit.residuals.iter().all(|r| r.abs() < 1e-12));
    }

    #[test]
    fn matches_normal_equations() {
        let x = DMatrix::from_fn(8, 2, |i, j| if j == 0 { 1.0 } else { (i as f64).sin() });
        let y: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).cos()).collect();
        let w: Vec<f64> = (0..8).map(|i| 1.0 + (i % 3) as f64).collect();
        let fit = weighted_ols(&x, &y, &w).unwrap();
        let wm = DMatrix::from_diagonal(&DVector::from_vec(w.clone()));
        let xtx = x.transpose() * &wm * &x;
        let xty = x.transpose() * &wm * DVector::from_vec(y.clone());
        let beta = xtx.try_inverse().unwrap() * xty;
        for k in 0..2 {
            assert!((fit.coef[k] - beta[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn collinear_design_is_rejected() {
        let x = DMatrix::from_fn(5, 2, |i, _| i as f64);
        assert!(matches!(ols(&x, &[1.0, 2.0, 3.0, 4.0, 5.0]), Err(Error::RankDeficient(_))));
    }
}
