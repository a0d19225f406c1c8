
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Condition estimates above this are treated as singular.
pub(crate) const MAX_CONDITION: f64 = 1e14;

/// `log(sum(exp(v)))` without overflow. Empty input gives `-inf`.
pub(crate) fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = v.map(|x| libm::exp(x - m)).sum();
    m + libm::log(s)
}

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Hager's estimate of `||A^-1||_1` for symmetric `A` given a solver for `A`.
fn inverse_norm1_estimate(n: usize, solve: impl Fn(&DVector<f64>) -> DVector<f64>) -> f64 {
    let mut x = DVector::from_element(n, 1.0 / n as f64);
    let mut est = 0.0;
    for iter in 0..5 {
        let y = solve(&x);
        let ny = y.lp_norm(1);
        if iter > 0 && ny <= est {
            break;
        }
        est = ny;
        let xi = y.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let z = solve(&xi);
        let (j, zj) = z.iter().enumerate().fold((0, 0.0), |acc, (i, v)| if v.abs() > acc.1 { (i, v.abs()) } else { acc });
        if zj <= z.dot(&x) {
            break;
        }
        x.fill(0.0);
        x[j] = 1.0;
    }
    est
}

/// Cholesky factor of a symmetric positive definite matrix with a 1-norm
/// condition check.
pub(crate) fn spd_factor(m: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let n = m.nrows();
    let a_norm = norm1(&m);
    let chol = Cholesky::new(m).ok_or(Error::Singular { condition: f64::INFINITY })?;
    if n > 0 {
        let cond = a_norm * inverse_norm1_estimate(n, |v| chol.solve(v));
        if !(cond <= MAX_CONDITION) {
            return Err(Error::Singular { condition: cond });
        }
    }
    Ok(chol)
}

/// Solves `m x = rhs` for symmetric positive definite `m`.
pub(crate) fn spd_solve(m: DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(spd_factor(m)?.solve(rhs))
}

/// Inverse of a symmetric positive definite matrix.
pub(crate) fn spd_inverse(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(spd_factor(m)?.inverse())
}
