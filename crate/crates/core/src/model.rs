//! Samples, basis functions and the parameter vector.
//!
//! Covariate vectors never carry the constant: basis index `0` denotes the
//! constant 1 and index `k >= 1` denotes column `k - 1` of the covariate row.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::DMatrix;

use crate::error::{config_err, invalid, Error, Result};

/// Dense row-major covariate table.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Covariates {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Covariates {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid!(
                "covariate table of {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(invalid!("ragged covariate rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, c: usize) -> f64 {
        self.data[i * self.cols + c]
    }

    pub fn column(&self, c: usize) -> impl Iterator<Item = f64> + Clone + '_ {
        (0..self.rows).map(move |i| self.get(i, c))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Applies `f` to every entry of column `c`.
    pub fn map_column(&mut self, c: usize, mut f: impl FnMut(f64) -> f64) {
        for i in 0..self.rows {
            let v = &mut self.data[i * self.cols + c];
            *v = f(*v);
        }
    }
}

/// Observed matches `(X_i, Y_i, W_i)`; row `i` of `firms` is the firm matched
/// to worker `i`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MatchSample {
    workers: Covariates,
    firms: Covariates,
    transfers: Vec<Option<f64>>,
    weights: Vec<f64>,
}

impl MatchSample {
    /// Builds a sample with uniform weights `1/n`.
    pub fn new(workers: Covariates, firms: Covariates, transfers: Vec<Option<f64>>) -> Result<Self> {
        let n = workers.rows();
        let w = if n == 0 { Vec::new() } else { vec![1.0 / n as f64; n] };
        Self::with_weights(workers, firms, transfers, w)
    }

    pub fn with_weights(
        workers: Covariates,
        firms: Covariates,
        transfers: Vec<Option<f64>>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let n = workers.rows();
        if n == 0 {
            return Err(invalid!("sample has no matches"));
        }
        if firms.rows() != n || transfers.len() != n || weights.len() != n {
            return Err(invalid!(
                "row counts differ: workers {n}, firms {}, transfers {}, weights {}",
                firms.rows(),
                transfers.len(),
                weights.len()
            ));
        }
        if let Some(p) = workers.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(invalid!("non-finite worker covariate at row {}", p / workers.cols().max(1)));
        }
        if let Some(p) = firms.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(invalid!("non-finite firm covariate at row {}", p / firms.cols().max(1)));
        }
        if let Some(i) = transfers.iter().position(|t| matches!(t, Some(v) if !v.is_finite())) {
            return Err(invalid!("non-finite transfer at row {i}"));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(invalid!("weights must be positive and finite"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid!("weights sum to {total}, expected 1"));
        }
        Ok(Self { workers, firms, transfers, weights })
    }

    pub fn len(&self) -> usize {
        self.workers.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn workers(&self) -> &Covariates {
        &self.workers
    }

    pub fn firms(&self) -> &Covariates {
        &self.firms
    }

    pub fn transfers(&self) -> &[Option<f64>] {
        &self.transfers
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn observed_transfers(&self) -> usize {
        self.transfers.iter().filter(|t| t.is_some()).count()
    }

    /// Same matches with a different transfer vector.
    pub fn with_transfers(&self, transfers: Vec<Option<f64>>) -> Result<Self> {
        Self::with_weights(self.workers.clone(), self.firms.clone(), transfers, self.weights.clone())
    }

    /// Same workers and transfers, firm covariates replaced.
    pub fn with_firms(&self, firms: Covariates) -> Result<Self> {
        Self::with_weights(self.workers.clone(), firms, self.transfers.clone(), self.weights.clone())
    }

    /// Weights scaled so that uniform weights give 1 per observation.
    pub(crate) fn frequency_weights(&self) -> impl Iterator<Item = f64> + '_ {
        let n = self.len() as f64;
        self.weights.iter().map(move |w| w * n)
    }
}

type BasisFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;

/// Basis function given by an arbitrary callable. The declared dependence
/// flags drive the identification guard, so they must be truthful.
#[derive(Clone)]
pub struct CustomBasis {
    pub name: String,
    pub uses_worker: bool,
    pub uses_firm: bool,
    f: Arc<BasisFn>,
}

impl CustomBasis {
    pub fn new(
        name: impl Into<String>,
        uses_worker: bool,
        uses_firm: bool,
        f: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), uses_worker, uses_firm, f: Arc::new(f) }
    }
}

impl fmt::Debug for CustomBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomBasis")
            .field("name", &self.name)
            .field("uses_worker", &self.uses_worker)
            .field("uses_firm", &self.uses_firm)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub enum BasisTerm {
    /// `x^(worker) * y^(firm)`, index 0 being the constant.
    Product { worker: usize, firm: usize },
    Custom(CustomBasis),
}

impl BasisTerm {
    pub fn product(worker: usize, firm: usize) -> Self {
        Self::Product { worker, firm }
    }

    pub fn uses_worker(&self) -> bool {
        match self {
            Self::Product { worker, .. } => *worker != 0,
            Self::Custom(c) => c.uses_worker,
        }
    }

    pub fn uses_firm(&self) -> bool {
        match self {
            Self::Product { firm, .. } => *firm != 0,
            Self::Custom(c) => c.uses_firm,
        }
    }

    /// True when the term is a function of both sides, i.e. not absorbed by
    /// the potentials in the matching likelihood.
    pub fn is_interaction(&self) -> bool {
        self.uses_worker() && self.uses_firm()
    }

    #[inline]
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Self::Product { worker, firm } => {
                let xv = if *worker == 0 { 1.0 } else { x[worker - 1] };
                let yv = if *firm == 0 { 1.0 } else { y[firm - 1] };
                xv * yv
            }
            Self::Custom(c) => (c.f)(x, y),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Product { worker, firm } => format!("x{worker}*y{firm}"),
            Self::Custom(c) => c.name.clone(),
        }
    }

    fn same_descriptor(&self, other: &Self) -> bool {
        match (self, other) {
            (Self::Product { worker: a, firm: b }, Self::Product { worker: c, firm: d }) => a == c && b == d,
            (Self::Custom(a), Self::Custom(b)) => a.name == b.name,
            _ => false,
        }
    }
}

/// Ordered basis functions with the side(s) each one enters.
#[derive(Debug, Clone)]
pub struct BasisSpec {
    terms: Vec<BasisTerm>,
    alpha_mask: Vec<bool>,
    gamma_mask: Vec<bool>,
}

impl BasisSpec {
    pub fn new(terms: Vec<BasisTerm>, alpha_mask: Vec<bool>, gamma_mask: Vec<bool>) -> Result<Self> {
        let k = terms.len();
        if alpha_mask.len() != k || gamma_mask.len() != k {
            return Err(config_err!("masks must have one entry per basis term ({k})"));
        }
        for (idx, term) in terms.iter().enumerate() {
            if !alpha_mask[idx] && !gamma_mask[idx] {
                return Err(config_err!("basis {} enters neither alpha nor gamma", term.label()));
            }
            // Amenities are identified only up to worker fixed effects and
            // productivity only up to firm fixed effects.
            if alpha_mask[idx] && term.uses_worker() && !term.uses_firm() {
                return Err(config_err!(
                    "basis {} depends on worker covariates only and cannot enter alpha",
                    term.label()
                ));
            }
            if gamma_mask[idx] && term.uses_firm() && !term.uses_worker() {
                return Err(config_err!(
                    "basis {} depends on firm covariates only and cannot enter gamma",
                    term.label()
                ));
            }
            if terms[..idx].iter().any(|t| t.same_descriptor(term)) {
                return Err(config_err!("duplicate basis {}", term.label()));
            }
        }
        Ok(Self { terms, alpha_mask, gamma_mask })
    }

    /// Product bases from `(worker index, firm index, in alpha, in gamma)`.
    pub fn products(items: &[(usize, usize, bool, bool)]) -> Result<Self> {
        Self::new(
            items.iter().map(|&(k, l, _, _)| BasisTerm::product(k, l)).collect(),
            items.iter().map(|t| t.2).collect(),
            items.iter().map(|t| t.3).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[BasisTerm] {
        &self.terms
    }

    pub fn alpha_mask(&self) -> &[bool] {
        &self.alpha_mask
    }

    pub fn gamma_mask(&self) -> &[bool] {
        &self.gamma_mask
    }

    /// Checks that every product index is within the covariate dimensions.
    pub fn check_dims(&self, dx: usize, dy: usize) -> Result<()> {
        for term in &self.terms {
            if let BasisTerm::Product { worker, firm } = term {
                if *worker > dx {
                    return Err(config_err!("basis {} needs worker covariate {worker}, have {dx}", term.label()));
                }
                if *firm > dy {
                    return Err(config_err!("basis {} needs firm covariate {firm}, have {dy}", term.label()));
                }
            }
        }
        Ok(())
    }

    /// Evaluates every basis at `(x, y)` into `out`. Dimensions are not checked.
    #[inline]
    pub(crate) fn eval_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        for (o, term) in out.iter_mut().zip(&self.terms) {
            *o = term.eval(x, y);
        }
    }

    /// Human-readable parameter names in [`Theta`] layout order.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.terms.iter().map(|t| format!("A[{}]", t.label())).collect();
        names.extend(self.terms.iter().map(|t| format!("Gamma[{}]", t.label())));
        names.extend(["sigma1", "sigma2", "t", "s2"].iter().map(|s| String::from(*s)));
        names
    }
}

/// Returns `(phi_1(x,y), ..., phi_K(x,y))`.
pub fn eval_basis(spec: &BasisSpec, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    spec.check_dims(x.len(), y.len())?;
    let mut out = vec![0.0; spec.len()];
    spec.eval_into(x, y, &mut out);
    Ok(out)
}

/// Full parameter vector `(A, Gamma, sigma1, sigma2, t, s2)` of the
/// renormalized model.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Theta {
    /// Amenity coefficients `A`.
    pub amenity: Vec<f64>,
    /// Productivity coefficients `Gamma`.
    pub productivity: Vec<f64>,
    pub sigma1: f64,
    pub sigma2: f64,
    pub t: f64,
    pub s2: f64,
}

/// Position of a parameter in the flat `2K + 4` layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    Amenity(usize),
    Productivity(usize),
    Sigma1,
    Sigma2,
    T,
    S2,
}

impl Param {
    pub fn index(self, k: usize) -> usize {
        match self {
            Self::Amenity(i) => i,
            Self::Productivity(i) => k + i,
            Self::Sigma1 => 2 * k,
            Self::Sigma2 => 2 * k + 1,
            Self::T => 2 * k + 2,
            Self::S2 => 2 * k + 3,
        }
    }

    pub fn from_index(idx: usize, k: usize) -> Self {
        match idx {
            i if i < k => Self::Amenity(i),
            i if i < 2 * k => Self::Productivity(i - k),
            i if i == 2 * k => Self::Sigma1,
            i if i == 2 * k + 1 => Self::Sigma2,
            i if i == 2 * k + 2 => Self::T,
            _ => Self::S2,
        }
    }
}

impl Theta {
    pub fn new(
        amenity: Vec<f64>,
        productivity: Vec<f64>,
        sigma1: f64,
        sigma2: f64,
        t: f64,
        s2: f64,
    ) -> Result<Self> {
        let theta = Self { amenity, productivity, sigma1, sigma2, t, s2 };
        theta.validate()?;
        Ok(theta)
    }

    pub fn validate(&self) -> Result<()> {
        if self.amenity.len() != self.productivity.len() {
            return Err(invalid!(
                "A has {} entries, Gamma has {}",
                self.amenity.len(),
                self.productivity.len()
            ));
        }
        if !(self.sigma1 >= 0.0) || !(self.sigma2 >= 0.0) {
            return Err(invalid!("sigma1 and sigma2 must be nonnegative"));
        }
        if !(self.s2 > 0.0) {
            return Err(invalid!("s2 must be positive"));
        }
        let aux = [self.sigma1, self.sigma2, self.t, self.s2];
        if self.amenity.iter().chain(&self.productivity).chain(&aux).any(|v| !v.is_finite()) {
            return Err(invalid!("theta has non-finite entries"));
        }
        Ok(())
    }

    /// Zero coefficients with the given auxiliary parameters.
    pub fn zeros(k: usize, sigma1: f64, sigma2: f64, t: f64, s2: f64) -> Self {
        Self { amenity: vec![0.0; k], productivity: vec![0.0; k], sigma1, sigma2, t, s2 }
    }

    pub fn k(&self) -> usize {
        self.amenity.len()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma1 + self.sigma2
    }

    /// `Phi = A + Gamma`.
    pub fn phi(&self) -> Vec<f64> {
        self.amenity.iter().zip(&self.productivity).map(|(a, g)| a + g).collect()
    }

    /// Flat `2K + 4` vector.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.k() + 4);
        v.extend_from_slice(&self.amenity);
        v.extend_from_slice(&self.productivity);
        v.extend_from_slice(&[self.sigma1, self.sigma2, self.t, self.s2]);
        v
    }

    pub fn from_slice(k: usize, v: &[f64]) -> Result<Self> {
        if v.len() != 2 * k + 4 {
            return Err(invalid!("expected {} parameters, got {}", 2 * k + 4, v.len()));
        }
        Self::new(v[..k].to_vec(), v[k..2 * k].to_vec(), v[2 * k], v[2 * k + 1], v[2 * k + 2], v[2 * k + 3])
    }

    pub fn get(&self, p: Param) -> f64 {
        match p {
            Param::Amenity(i) => self.amenity[i],
            Param::Productivity(i) => self.productivity[i],
            Param::Sigma1 => self.sigma1,
            Param::Sigma2 => self.sigma2,
            Param::T => self.t,
            Param::S2 => self.s2,
        }
    }

    pub fn set(&mut self, p: Param, v: f64) {
        match p {
            Param::Amenity(i) => self.amenity[i] = v,
            Param::Productivity(i) => self.productivity[i] = v,
            Param::Sigma1 => self.sigma1 = v,
            Param::Sigma2 => self.sigma2 = v,
            Param::T => self.t = v,
            Param::S2 => self.s2 = v,
        }
    }

    /// Copy with masked coefficients forced to structural zeros.
    pub fn masked(&self, spec: &BasisSpec) -> Self {
        let mut out = self.clone();
        for k in 0..spec.len().min(self.k()) {
            if !spec.alpha_mask[k] {
                out.amenity[k] = 0.0;
            }
            if !spec.gamma_mask[k] {
                out.productivity[k] = 0.0;
            }
        }
        out
    }

    pub(crate) fn check_spec(&self, spec: &BasisSpec) -> Result<()> {
        if self.k() != spec.len() {
            return Err(invalid!("theta has K = {}, basis has K = {}", self.k(), spec.len()));
        }
        Ok(())
    }

    /// Effective coefficients entering alpha, gamma and phi after masking.
    pub(crate) fn effective(&self, spec: &BasisSpec) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let a: Vec<f64> = self.amenity.iter().zip(&spec.alpha_mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
        let g: Vec<f64> =
            self.productivity.iter().zip(&spec.gamma_mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
        let p = a.iter().zip(&g).map(|(x, y)| x + y).collect();
        (a, g, p)
    }
}

fn dot(c: &[f64], v: &[f64]) -> f64 {
    c.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// `alpha(x, y; A) = sum_k A_k phi_k(x, y)` over alpha-active bases.
pub fn alpha_value(theta: &Theta, spec: &BasisSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    theta.check_spec(spec)?;
    let (a, _, _) = theta.effective(spec);
    Ok(dot(&a, &eval_basis(spec, x, y)?))
}

/// `gamma(x, y; Gamma) = sum_k Gamma_k phi_k(x, y)` over gamma-active bases.
pub fn gamma_value(theta: &Theta, spec: &BasisSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    theta.check_spec(spec)?;
    let (_, g, _) = theta.effective(spec);
    Ok(dot(&g, &eval_basis(spec, x, y)?))
}

/// `phi_ij = phi(X_i, Y_j; A + Gamma)` for every worker/firm pair in the sample.
pub fn phi_matrix(theta: &Theta, spec: &BasisSpec, sample: &MatchSample) -> Result<DMatrix<f64>> {
    theta.check_spec(spec)?;
    spec.check_dims(sample.workers().cols(), sample.firms().cols())?;
    let (_, _, phi) = theta.effective(spec);
    let n = sample.len();
    let mut out = DMatrix::zeros(n, n);
    let mut basis = vec![0.0; spec.len()];
    for i in 0..n {
        let x = sample.workers().row(i);
        for j in 0..n {
            spec.eval_into(x, sample.firms().row(j), &mut basis);
            let v = dot(&phi, &basis);
            if !v.is_finite() {
                let k = basis
                    .iter()
                    .zip(&phi)
                    .position(|(b, p)| !(b * p).is_finite())
                    .unwrap_or(spec.len().saturating_sub(1));
                return Err(Error::NonFinitePhi { i, j, k });
            }
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

/// Column means and standard deviations used to standardize a sample.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Standardization {
    pub worker_columns: Vec<usize>,
    pub worker_mean: Vec<f64>,
    pub worker_sd: Vec<f64>,
    pub firm_columns: Vec<usize>,
    pub firm_mean: Vec<f64>,
    pub firm_sd: Vec<f64>,
}

fn mean_sd(vals: impl Iterator<Item = f64> + Clone, weights: &[f64]) -> (f64, f64) {
    let m: f64 = vals.clone().zip(weights).map(|(v, w)| v * w).sum();
    let var: f64 = vals.zip(weights).map(|(v, w)| w * (v - m) * (v - m)).sum();
    (m, libm::sqrt(var))
}

impl Standardization {
    /// Rescales a product-basis coefficient estimated on standardized
    /// covariates into a slope on the raw scale. Mean shifts only move mass
    /// into lower-order terms, which the potentials or `t` absorb.
    pub fn raw_coefficient(&self, term: &BasisTerm, coef: f64) -> f64 {
        let BasisTerm::Product { worker, firm } = term else {
            return coef;
        };
        let mut scale = 1.0;
        if *worker > 0 {
            if let Some(p) = self.worker_columns.iter().position(|&c| c == worker - 1) {
                scale *= self.worker_sd[p];
            }
        }
        if *firm > 0 {
            if let Some(p) = self.firm_columns.iter().position(|&c| c == firm - 1) {
                scale *= self.firm_sd[p];
            }
        }
        coef / scale
    }
}

/// Standardizes the listed covariate columns to weighted zero mean and unit
/// variance. Constant columns are rejected.
pub fn standardize(
    sample: &MatchSample,
    worker_columns: &[usize],
    firm_columns: &[usize],
) -> Result<(MatchSample, Standardization)> {
    let mut workers = sample.workers().clone();
    let mut firms = sample.firms().clone();
    let w = sample.weights();
    let mut rec = Standardization {
        worker_columns: worker_columns.to_vec(),
        worker_mean: Vec::new(),
        worker_sd: Vec::new(),
        firm_columns: firm_columns.to_vec(),
        firm_mean: Vec::new(),
        firm_sd: Vec::new(),
    };
    for &c in worker_columns {
        if c >= workers.cols() {
            return Err(config_err!("worker column {c} out of range"));
        }
        let (m, s) = mean_sd(workers.column(c), w);
        if !(s > 0.0) {
            return Err(config_err!("worker column {c} is constant and cannot be standardized"));
        }
        workers.map_column(c, |v| (v - m) / s);
        rec.worker_mean.push(m);
        rec.worker_sd.push(s);
    }
    for &c in firm_columns {
        if c >= firms.cols() {
            return Err(config_err!("firm column {c} out of range"));
        }
        let (m, s) = mean_sd(firms.column(c), w);
        if !(s > 0.0) {
            return Err(config_err!("firm column {c} is constant and cannot be standardized"));
        }
        firms.map_column(c, |v| (v - m) / s);
        rec.firm_mean.push(m);
        rec.firm_sd.push(s);
    }
    let out = MatchSample::with_weights(workers, firms, sample.transfers().to_vec(), w.to_vec())?;
    Ok((out, rec))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample3() -> MatchSample {
        let x = Covariates::from_rows(&[vec![0.3], vec![-1.2], vec![2.0]]).unwrap();
        let y = Covariates::from_rows(&[vec![1.5], vec![0.1], vec![-0.7]]).unwrap();
        MatchSample::new(x, y, vec![None; 3]).unwrap()
    }

    #[test]
    fn eval_basis_examples() {
        let spec = BasisSpec::products(&[(0, 0, true, true)]).unwrap();
        assert_eq!(eval_basis(&spec, &[4.0], &[5.0]).unwrap(), vec![1.0]);
        let spec = BasisSpec::products(&[(1, 1, true, true)]).unwrap();
        assert_eq!(eval_basis(&spec, &[2.0], &[3.0]).unwrap(), vec![6.0]);
        let spec = BasisSpec::products(&[(0, 1, true, false), (1, 0, false, true)]).unwrap();
        assert_eq!(eval_basis(&spec, &[-1.0], &[0.5]).unwrap(), vec![0.5, -1.0]);
    }

    #[test]
    fn eval_basis_rejects_out_of_range_index() {
        let spec = BasisSpec::products(&[(2, 1, true, true)]).unwrap();
        assert!(matches!(eval_basis(&spec, &[1.0], &[1.0]), Err(Error::Config(_))));
    }

    #[test]
    fn alpha_and_gamma_values() {
        let spec = BasisSpec::products(&[(0, 1, true, false)]).unwrap();
        let theta = Theta::new(vec![-0.02], vec![0.0], 0.5, 0.5, 0.0, 1.0).unwrap();
        assert!((alpha_value(&theta, &spec, &[9.0], &[2.0]).unwrap() + 0.04).abs() < 1e-15);

        let spec = BasisSpec::products(&[(1, 1, true, true), (0, 1, true, false)]).unwrap();
        let theta = Theta::new(vec![0.5, 0.5], vec![0.0, 0.0], 0.5, 0.5, 0.0, 1.0).unwrap();
        assert_eq!(alpha_value(&theta, &spec, &[1.0], &[1.0]).unwrap(), 1.0);
        let zero = Theta::zeros(2, 0.5, 0.5, 0.0, 1.0);
        assert_eq!(alpha_value(&zero, &spec, &[3.0], &[-2.0]).unwrap(), 0.0);
        assert_eq!(gamma_value(&zero, &spec, &[3.0], &[-2.0]).unwrap(), 0.0);

        let spec = BasisSpec::products(&[(1, 0, false, true)]).unwrap();
        let theta = Theta::new(vec![0.0], vec![1.0], 0.5, 0.5, 0.0, 1.0).unwrap();
        assert_eq!(gamma_value(&theta, &spec, &[0.057], &[4.0]).unwrap(), 0.057);
    }

    #[test]
    fn alpha_plus_gamma_is_phi() {
        let spec = BasisSpec::products(&[(1, 1, true, true), (0, 1, true, false), (1, 0, false, true)]).unwrap();
        let theta = Theta::new(vec![0.3, -0.4, 0.0], vec![0.9, 0.0, 1.1], 0.2, 0.3, 0.0, 1.0).unwrap();
        let s = sample3();
        let phi = phi_matrix(&theta, &spec, &s).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let x = s.workers().row(i);
                let y = s.firms().row(j);
                let sum = alpha_value(&theta, &spec, x, y).unwrap() + gamma_value(&theta, &spec, x, y).unwrap();
                assert!((sum - phi[(i, j)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn phi_matrix_outer_product() {
        let spec = BasisSpec::products(&[(1, 1, true, true)]).unwrap();
        let theta = Theta::new(vec![0.25], vec![0.75], 0.5, 0.5, 0.0, 1.0).unwrap();
        let s = sample3();
        let phi = phi_matrix(&theta, &spec, &s).unwrap();
        // direct loop oracle
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(phi[(i, j)], s.workers().get(i, 0) * s.firms().get(j, 0));
            }
        }
        let zero = Theta::zeros(1, 0.5, 0.5, 0.0, 1.0);
        assert!(phi_matrix(&zero, &spec, &s).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn phi_matrix_single_match() {
        let spec = BasisSpec::products(&[(1, 1, true, true)]).unwrap();
        let theta = Theta::new(vec![1.0], vec![1.0], 0.5, 0.5, 0.0, 1.0).unwrap();
        let s = MatchSample::new(
            Covariates::from_rows(&[vec![2.0]]).unwrap(),
            Covariates::from_rows(&[vec![3.0]]).unwrap(),
            vec![Some(1.0)],
        )
        .unwrap();
        let phi = phi_matrix(&theta, &spec, &s).unwrap();
        assert_eq!(phi.shape(), (1, 1));
        assert_eq!(phi[(0, 0)], 12.0);
    }

    #[test]
    fn phi_matrix_overflow_names_entry() {
        let spec = BasisSpec::products(&[(1, 1, true, true), (0, 1, true, false)]).unwrap();
        let theta = Theta::new(vec![0.0, 1e300], vec![0.0, 0.0], 0.5, 0.5, 0.0, 1.0).unwrap();
        let s = MatchSample::new(
            Covariates::from_rows(&[vec![1.0], vec![1.0]]).unwrap(),
            Covariates::from_rows(&[vec![1.0], vec![1e10]]).unwrap(),
            vec![None, None],
        )
        .unwrap();
        assert_eq!(phi_matrix(&theta, &spec, &s), Err(Error::NonFinitePhi { i: 0, j: 1, k: 1 }));
    }

    #[test]
    fn identification_guard() {
        assert!(BasisSpec::products(&[(1, 0, true, false)]).is_err());
        assert!(BasisSpec::products(&[(0, 1, false, true)]).is_err());
        assert!(BasisSpec::products(&[(1, 1, false, false)]).is_err());
        assert!(BasisSpec::products(&[(1, 1, true, true), (1, 1, true, false)]).is_err());
        assert!(BasisSpec::products(&[(1, 0, false, true), (0, 1, true, false)]).is_ok());
        let custom = CustomBasis::new("x_sq", true, false, |x, _| x[0] * x[0]);
        assert!(BasisSpec::new(vec![BasisTerm::Custom(custom.clone())], vec![true], vec![false]).is_err());
        assert!(BasisSpec::new(vec![BasisTerm::Custom(custom)], vec![false], vec![true]).is_ok());
    }

    #[test]
    fn sample_validation() {
        let x = Covariates::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let y = Covariates::from_rows(&[vec![0.0], vec![f64::NAN]]).unwrap();
        assert!(MatchSample::new(x.clone(), y, vec![None, None]).is_err());
        let y = Covariates::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(MatchSample::with_weights(x.clone(), y.clone(), vec![None, None], vec![0.5, 0.6]).is_err());
        assert!(MatchSample::with_weights(x, y, vec![None, None], vec![0.25, 0.75]).is_ok());
    }

    #[test]
    fn standardize_round_trip_coefficient() {
        let s = sample3();
        let (z, rec) = standardize(&s, &[0], &[0]).unwrap();
        let m: f64 = z.workers().column(0).sum::<f64>() / 3.0;
        assert!(m.abs() < 1e-14);
        let term = BasisTerm::product(1, 1);
        let raw = rec.raw_coefficient(&term, 2.0);
        assert!((raw - 2.0 / (rec.worker_sd[0] * rec.firm_sd[0])).abs() < 1e-14);
    }
}
