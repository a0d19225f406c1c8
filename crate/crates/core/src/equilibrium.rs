//! Sample potentials `(a, b)` of the renormalized model, the induced matching
//! density `pi_ij = exp(phi_ij - a_i - b_j)`, and the implicit derivatives of
//! the potentials with respect to `Phi`.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};
use crate::linalg::{log_sum_exp, spd_solve};
use crate::model::{BasisSpec, MatchSample, Theta};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SolverConfig {
    /// Sup-norm bound on the marginal violations.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Potentials {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchingDensity {
    pub log_pi: DMatrix<f64>,
}

impl MatchingDensity {
    pub fn pi(&self) -> DMatrix<f64> {
        self.log_pi.map(libm::exp)
    }
}

/// Solves the sample system with row and column masses both equal to `weights`.
pub fn solve_potentials(phi: &DMatrix<f64>, weights: &[f64], config: &SolverConfig) -> Result<Potentials> {
    solve_potentials_with(phi, weights, weights, config, None)
}

/// Log-domain IPFP for `sum_j exp(phi_ij - a_i - b_j) = p_i` and
/// `sum_i exp(phi_ij - a_i - b_j) = q_j`, normalized so that `a_0 = 0`.
/// `warm` supplies starting potentials of matching shape.
pub fn solve_potentials_with(
    phi: &DMatrix<f64>,
    row_mass: &[f64],
    col_mass: &[f64],
    config: &SolverConfig,
    warm: Option<&Potentials>,
) -> Result<Potentials> {
    let (nr, nc) = phi.shape();
    if row_mass.len() != nr || col_mass.len() != nc || nr == 0 || nc == 0 {
        return Err(invalid!("phi is {nr}x{nc} but masses have lengths {} and {}", row_mass.len(), col_mass.len()));
    }
    if !(config.tol > 0.0) {
        return Err(invalid!("solver tolerance must be positive"));
    }
    if row_mass.iter().chain(col_mass).any(|&m| !(m > 0.0) || !m.is_finite()) {
        return Err(invalid!("masses must be positive and finite"));
    }
    let (tr, tc): (f64, f64) = (row_mass.iter().sum(), col_mass.iter().sum());
    if (tr - tc).abs() > 1e-12 * tr.max(tc) {
        return Err(invalid!("row mass {tr} and column mass {tc} differ"));
    }
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(invalid!("phi has non-finite entries"));
    }

    // Row-major copy so both sweeps stream through memory.
    let m: Vec<f64> = phi.transpose().as_slice().to_vec();
    let log_p: Vec<f64> = row_mass.iter().map(|v| libm::log(*v)).collect();
    let log_q: Vec<f64> = col_mass.iter().map(|v| libm::log(*v)).collect();

    let mut a = match warm {
        Some(w) if w.a.len() == nr && w.b.len() == nc => w.a.clone(),
        _ => vec![0.0; nr],
    };
    let mut b = vec![0.0; nc];
    let mut col_max = vec![0.0; nc];
    let mut col_sum = vec![0.0; nc];

    let update_b = |a: &[f64], b: &mut [f64], col_max: &mut [f64], col_sum: &mut [f64]| {
        col_max.fill(f64::NEG_INFINITY);
        for i in 0..nr {
            let row = &m[i * nc..(i + 1) * nc];
            for (cm, v) in col_max.iter_mut().zip(row) {
                *cm = f64::max(*cm, v - a[i]);
            }
        }
        col_sum.fill(0.0);
        for i in 0..nr {
            let row = &m[i * nc..(i + 1) * nc];
            for ((s, v), cm) in col_sum.iter_mut().zip(row).zip(col_max.iter()) {
                *s += libm::exp(v - a[i] - cm);
            }
        }
        for j in 0..nc {
            b[j] = col_max[j] + libm::log(col_sum[j]) - log_q[j];
        }
    };

    update_b(&a, &mut b, &mut col_max, &mut col_sum);
    let mut iterations = 0;
    let mut row_lse = vec![0.0; nr];
    loop {
        let mut residual: f64 = 0.0;
        for i in 0..nr {
            let row = &m[i * nc..(i + 1) * nc];
            let r = log_sum_exp(row.iter().zip(&b).map(|(v, bj)| v - bj));
            if !r.is_finite() {
                return Err(Error::Numeric(alloc::format!("non-finite row sum at row {i}, iteration {iterations}")));
            }
            row_lse[i] = r;
            residual = residual.max((libm::exp(r - a[i]) - row_mass[i]).abs());
        }
        if residual.is_nan() {
            return Err(Error::Numeric(alloc::format!("NaN residual at iteration {iterations}")));
        }
        if residual <= config.tol {
            let shift = a[0];
            a.iter_mut().for_each(|v| *v -= shift);
            b.iter_mut().for_each(|v| *v += shift);
            a[0] = 0.0;
            return Ok(Potentials { a, b, iterations, residual });
        }
        if iterations >= config.max_iter {
            return Err(Error::NotConverged { iterations, residual });
        }
        for i in 0..nr {
            a[i] = row_lse[i] - log_p[i];
        }
        update_b(&a, &mut b, &mut col_max, &mut col_sum);
        iterations += 1;
    }
}

/// `log pi_ij = phi_ij - a_i - b_j`.
pub fn matching_density(phi: &DMatrix<f64>, pots: &Potentials) -> MatchingDensity {
    let log_pi = DMatrix::from_fn(phi.nrows(), phi.ncols(), |i, j| phi[(i, j)] - pots.a[i] - pots.b[j]);
    MatchingDensity { log_pi }
}

/// Equilibrium transfer at each observed match,
/// `w_i = sigma1 (gamma_ii - b_i) + sigma2 (a_i - alpha_ii) + t`.
pub fn sample_wages(theta: &Theta, spec: &BasisSpec, sample: &MatchSample, pots: &Potentials) -> Result<Vec<f64>> {
    theta.check_spec(spec)?;
    spec.check_dims(sample.workers().cols(), sample.firms().cols())?;
    let n = sample.len();
    if pots.a.len() != n || pots.b.len() != n {
        return Err(invalid!("potentials do not match the sample size"));
    }
    let (am, gm, _) = theta.effective(spec);
    let mut basis = vec![0.0; spec.len()];
    Ok((0..n)
        .map(|i| {
            spec.eval_into(sample.workers().row(i), sample.firms().row(i), &mut basis);
            let alpha: f64 = am.iter().zip(&basis).map(|(c, v)| c * v).sum();
            let gamma: f64 = gm.iter().zip(&basis).map(|(c, v)| c * v).sum();
            theta.sigma1 * (gamma - pots.b[i]) + theta.sigma2 * (pots.a[i] - alpha) + theta.t
        })
        .collect())
}

/// Implicit derivatives of the potentials for a sample: `phi_grad[k]` holds
/// `d phi_ij / d Phi_k`. Returns `(Da, Db)` as `n x K` matrices.
pub fn differentiate_potentials(
    phi_grad: &[DMatrix<f64>],
    density: &MatchingDensity,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (nr, nc) = density.log_pi.shape();
    let pi = density.pi();
    let k = phi_grad.len();
    if phi_grad.iter().any(|g| g.shape() != (nr, nc)) {
        return Err(invalid!("basis tensor does not match the density shape"));
    }
    let mut e = DMatrix::zeros(nr, k);
    let mut f = DMatrix::zeros(nc, k);
    for (kk, g) in phi_grad.iter().enumerate() {
        for j in 0..nc {
            for i in 0..nr {
                let v = pi[(i, j)] * g[(i, j)];
                e[(i, kk)] += v;
                f[(j, kk)] += v;
            }
        }
    }
    potential_derivatives(&pi, e, &f)
}

/// Solves the linearized marginal equations
///
/// ```text
/// p_i Da_i + sum_j pi_ij Db_j = E_i   (i >= 1),   Da_0 = 0
/// sum_i pi_ij Da_i + q_j Db_j = F_j
/// ```
///
/// with `p`, `q` the row and column sums of `pi`, through the Schur
/// complement on the `Db` block (which is positive definite).
pub(crate) fn potential_derivatives(
    pi: &DMatrix<f64>,
    mut e: DMatrix<f64>,
    f: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (nr, nc) = pi.shape();
    let k = e.ncols();
    let p: Vec<f64> = pi.row_iter().map(|r| r.sum()).collect();
    let q: Vec<f64> = pi.column_iter().map(|c| c.sum()).collect();
    for kk in 0..k {
        e[(0, kk)] = 0.0;
    }

    // S = P^{-1/2} Pi with the normalization row dropped.
    let mut s = pi.clone();
    for i in 0..nr {
        let scale = if i == 0 { 0.0 } else { 1.0 / libm::sqrt(p[i]) };
        s.row_mut(i).scale_mut(scale);
    }
    let mut m = -(s.transpose() * &s);
    for j in 0..nc {
        m[(j, j)] += q[j];
    }
    let mut pe = e.clone();
    for i in 1..nr {
        pe.row_mut(i).scale_mut(1.0 / p[i]);
    }
    let rhs = f - pi.transpose() * &pe;
    let db = spd_solve(m, &rhs)?;
    let mut da = e - pi * &db;
    da.row_mut(0).fill(0.0);
    for i in 1..nr {
        da.row_mut(i).scale_mut(1.0 / p[i]);
    }
    Ok((da, db))
}
