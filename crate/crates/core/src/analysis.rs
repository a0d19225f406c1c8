//! Post-estimation quantities: value of a statistical life, the hedonic wage
//! regression, counterfactual equilibria and the Gini coefficient.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::equilibrium::SolverConfig;
use crate::error::{config_err, invalid, Result};
use crate::likelihood::LikelihoodEngine;
use crate::model::{BasisSpec, BasisTerm, MatchSample, Theta};
use crate::ols::{weighted_ols, OlsFit};

/// Units for converting a risk slope into a value per statistical life.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VslUnits {
    /// Mean annual earnings `z`, in currency per year.
    pub mean_earnings: f64,
    /// Risk-covariate units per unit of annual fatality probability, e.g.
    /// `1e5` when risk is recorded per 100,000 workers.
    pub risk_unit_scale: f64,
}

/// Structural VSL `-(sigma1 + sigma2) A_risk z scale` for the alpha-active
/// basis that is linear in firm covariate `risk` (1-based, as in basis
/// descriptors). Amenities are stored per unit of `sigma`, hence the factor.
pub fn vsl(theta: &Theta, spec: &BasisSpec, risk: usize, units: &VslUnits) -> Result<f64> {
    theta.check_spec(spec)?;
    let k = spec
        .terms()
        .iter()
        .zip(spec.alpha_mask())
        .position(|(t, &m)| m && matches!(t, BasisTerm::Product { worker: 0, firm } if *firm == risk))
        .ok_or_else(|| config_err!("alpha has no basis linear in firm covariate {risk}"))?;
    Ok(-theta.sigma() * theta.amenity[k] * units.mean_earnings * units.risk_unit_scale)
}

/// VSL at a given pair `(x, y)`, using every alpha-active basis that depends
/// on firm covariate `risk`. Custom bases are differentiated numerically.
pub fn vsl_at(theta: &Theta, spec: &BasisSpec, risk: usize, x: &[f64], y: &[f64], units: &VslUnits) -> Result<f64> {
    theta.check_spec(spec)?;
    spec.check_dims(x.len(), y.len())?;
    if risk == 0 || risk > y.len() {
        return Err(config_err!("risk coordinate {risk} out of range"));
    }
    let mut slope = 0.0;
    let mut found = false;
    for ((term, &m), a) in spec.terms().iter().zip(spec.alpha_mask()).zip(&theta.amenity) {
        if !m {
            continue;
        }
        let d = match term {
            BasisTerm::Product { worker, firm } if *firm == risk => {
                if *worker == 0 {
                    1.0
                } else {
                    x[worker - 1]
                }
            }
            BasisTerm::Product { .. } => continue,
            BasisTerm::Custom(c) if c.uses_firm => {
                let h = 1e-6 * y[risk - 1].abs().max(1.0);
                let (mut yp, mut ym) = (y.to_vec(), y.to_vec());
                yp[risk - 1] += h;
                ym[risk - 1] -= h;
                (term.eval(x, &yp) - term.eval(x, &ym)) / (2.0 * h)
            }
            BasisTerm::Custom(_) => continue,
        };
        found = true;
        slope += a * d;
    }
    if !found {
        return Err(config_err!("alpha has no basis depending on firm covariate {risk}"));
    }
    Ok(-theta.sigma() * slope * units.mean_earnings * units.risk_unit_scale)
}

/// Regressors of the hedonic wage regression. Column indices are 0-based.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HedonicSpec {
    pub worker_columns: Vec<usize>,
    pub firm_columns: Vec<usize>,
    /// Firm column holding the fatality risk; must be in `firm_columns`.
    pub risk_column: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HedonicResult {
    /// `const`, then worker columns, then firm columns.
    pub names: Vec<String>,
    pub fit: OlsFit,
    pub risk_coefficient: f64,
    pub risk_std_error: Option<f64>,
    pub vsl_h: f64,
    pub rows: usize,
}

/// OLS of observed transfers on a constant and the listed covariates, with
/// `VSL^h = beta_risk z scale`.
pub fn hedonic_baseline(sample: &MatchSample, spec: &HedonicSpec, units: &VslUnits) -> Result<HedonicResult> {
    let pos = spec
        .firm_columns
        .iter()
        .position(|&c| c == spec.risk_column)
        .ok_or_else(|| config_err!("risk column {} is not among the firm regressors", spec.risk_column))?;
    if let Some(&c) = spec.worker_columns.iter().find(|&&c| c >= sample.workers().cols()) {
        return Err(config_err!("worker column {c} out of range"));
    }
    if let Some(&c) = spec.firm_columns.iter().find(|&&c| c >= sample.firms().cols()) {
        return Err(config_err!("firm column {c} out of range"));
    }
    let rows: Vec<usize> = (0..sample.len()).filter(|&i| sample.transfers()[i].is_some()).collect();
    let p = 1 + spec.worker_columns.len() + spec.firm_columns.len();
    let x = DMatrix::from_fn(rows.len(), p, |r, c| {
        let i = rows[r];
        if c == 0 {
            1.0
        } else if c <= spec.worker_columns.len() {
            sample.workers().get(i, spec.worker_columns[c - 1])
        } else {
            sample.firms().get(i, spec.firm_columns[c - 1 - spec.worker_columns.len()])
        }
    });
    let y: Vec<f64> = rows.iter().filter_map(|&i| sample.transfers()[i]).collect();
    let w: Vec<f64> = rows.iter().map(|&i| sample.weights()[i]).collect();
    let fit = weighted_ols(&x, &y, &w)?;
    let idx = 1 + spec.worker_columns.len() + pos;
    let beta = fit.coef[idx];
    let mut names = vec![String::from("const")];
    names.extend(spec.worker_columns.iter().map(|c| alloc::format!("x{}", c + 1)));
    names.extend(spec.firm_columns.iter().map(|c| alloc::format!("y{}", c + 1)));
    Ok(HedonicResult {
        names,
        risk_std_error: fit.std_errors.as_ref().map(|s| s[idx]),
        fit,
        risk_coefficient: beta,
        vsl_h: beta * units.mean_earnings * units.risk_unit_scale,
        rows: rows.len(),
    })
}

/// Map applied to every firm covariate row.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case", tag = "kind"))]
pub enum FirmTransform {
    Identity,
    /// Caps a firm column (0-based) at `max`.
    Cap { column: usize, max: f64 },
}

impl FirmTransform {
    fn apply(&self, sample: &MatchSample) -> Result<MatchSample> {
        match *self {
            Self::Identity => Ok(sample.clone()),
            Self::Cap { column, max } => {
                if column >= sample.firms().cols() {
                    return Err(config_err!("cap column {column} out of range"));
                }
                let mut firms = sample.firms().clone();
                firms.map_column(column, |v| v.min(max));
                sample.with_firms(firms)
            }
        }
    }
}

/// How transfers relate to wage levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TransferScale {
    #[default]
    Identity,
    /// Transfers are log wages.
    Log,
}

impl TransferScale {
    pub fn level(self, w: f64) -> f64 {
        match self {
            Self::Identity => w,
            Self::Log => libm::exp(w),
        }
    }
}

/// Equilibrium of one market, collapsed to worker and firm classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEquilibrium {
    /// Matching mass of each (worker class, firm class) cell.
    pub pi: DMatrix<f64>,
    /// Transfer `w(x_c, y_d)` of each cell.
    pub wages: DMatrix<f64>,
    pub worker_mass: Vec<f64>,
    pub firm_mass: Vec<f64>,
    pub worker_class: Vec<usize>,
    pub firm_class: Vec<usize>,
    /// Sup-norm marginal violation of `pi`.
    pub marginal_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualResult {
    pub before: ClassEquilibrium,
    pub after: ClassEquilibrium,
    /// Model transfers at the observed pairs, before and after the firm map.
    pub wages_before: Vec<f64>,
    pub wages_after: Vec<f64>,
    /// Wage levels at the observed pairs when transfers are logs.
    pub level_wages_before: Option<Vec<f64>>,
    pub level_wages_after: Option<Vec<f64>>,
    /// Mass of workers who change firm: half the L1 distance between each
    /// worker's job distribution before and after, averaged over workers.
    pub share_changed: f64,
    /// Relative change in the mean wage level over the equilibrium matching.
    pub mean_wage_change: f64,
    pub gini_before: f64,
    pub gini_after: f64,
}

fn class_equilibrium(theta: &Theta, spec: &BasisSpec, sample: &MatchSample, config: &SolverConfig) -> Result<(ClassEquilibrium, Vec<f64>)> {
    let mut engine = LikelihoodEngine::new(spec, sample, *config)?;
    engine.set_warm_start(false);
    let ev = engine.evaluate(theta)?;
    let cls = engine.classes();
    let (nc, nd) = (cls.workers.len(), cls.firms.len());
    let (am, gm, _) = theta.effective(spec);
    let mut buf = vec![0.0; spec.len()];
    // Members of a class share covariates and weight, hence potentials.
    let pi = ev.class_pi();
    let mut wages = DMatrix::zeros(nc, nd);
    for c in 0..nc {
        let i = cls.workers.representative[c];
        for d in 0..nd {
            let j = cls.firms.representative[d];
            spec.eval_into(sample.workers().row(i), sample.firms().row(j), &mut buf);
            let dot = |v: &[f64]| v.iter().zip(&buf).map(|(a, b)| a * b).sum::<f64>();
            let (ai, bj) = (ev.potentials.a[i], ev.potentials.b[j]);
            wages[(c, d)] = theta.sigma1 * (dot(&gm) - bj) + theta.sigma2 * (ai - dot(&am)) + theta.t;
        }
    }
    let mut residual: f64 = 0.0;
    for c in 0..nc {
        residual = residual.max((pi.row(c).sum() - cls.workers.mass[c]).abs());
    }
    for d in 0..nd {
        residual = residual.max((pi.column(d).sum() - cls.firms.mass[d]).abs());
    }
    Ok((
        ClassEquilibrium {
            pi,
            wages,
            worker_mass: cls.workers.mass.clone(),
            firm_mass: cls.firms.mass.clone(),
            worker_class: cls.workers.class_of.clone(),
            firm_class: cls.firms.class_of.clone(),
            marginal_residual: residual,
        },
        ev.wages,
    ))
}

fn cell_stats(eq: &ClassEquilibrium, scale: TransferScale) -> Result<(f64, f64)> {
    let levels: Vec<f64> = eq.wages.iter().map(|w| scale.level(*w)).collect();
    let mass: Vec<f64> = eq.pi.iter().copied().collect();
    let total: f64 = mass.iter().sum();
    let mean = levels.iter().zip(&mass).map(|(l, m)| l * m).sum::<f64>() / total;
    Ok((mean, gini(&levels, &mass)?))
}

/// Re-solves the equilibrium at fixed `theta` after mapping every firm's
/// covariates through `transform`. Workers and weights are unchanged.
pub fn counterfactual(
    theta: &Theta,
    spec: &BasisSpec,
    sample: &MatchSample,
    transform: &FirmTransform,
    scale: TransferScale,
    config: &SolverConfig,
) -> Result<CounterfactualResult> {
    let moved = transform.apply(sample)?;
    let (before, wages_before) = class_equilibrium(theta, spec, sample, config)?;
    let (after, wages_after) = class_equilibrium(theta, spec, &moved, config)?;
    if before.worker_class != after.worker_class {
        return Err(invalid!("worker classes changed under a firm transform"));
    }

    // Firms sharing both their before and after class have identical
    // conditional probabilities, so the L1 distance is summed per group.
    let mut groups: Vec<(usize, usize, f64)> = Vec::new();
    for (j, w) in sample.weights().iter().enumerate() {
        let key = (before.firm_class[j], after.firm_class[j]);
        match groups.iter_mut().find(|g| (g.0, g.1) == key) {
            Some(g) => g.2 += w,
            None => groups.push((key.0, key.1, *w)),
        }
    }
    let mut share = 0.0;
    for c in 0..before.worker_mass.len() {
        for &(d, e, wg) in &groups {
            let p0 = before.pi[(c, d)] / before.firm_mass[d];
            let p1 = after.pi[(c, e)] / after.firm_mass[e];
            share += 0.5 * (p0 - p1).abs() * wg;
        }
    }

    let (mean0, gini_before) = cell_stats(&before, scale)?;
    let (mean1, gini_after) = cell_stats(&after, scale)?;
    let levels = |w: &[f64]| match scale {
        TransferScale::Identity => None,
        TransferScale::Log => Some(w.iter().map(|v| libm::exp(*v)).collect()),
    };
    Ok(CounterfactualResult {
        level_wages_before: levels(&wages_before),
        level_wages_after: levels(&wages_after),
        wages_before,
        wages_after,
        share_changed: share,
        mean_wage_change: (mean1 - mean0) / mean0,
        gini_before,
        gini_after,
        before,
        after,
    })
}

/// Weighted Gini coefficient `1 - sum_k W_k (L_k + L_{k-1})` over values
/// sorted ascending, with `W_k` the weight share and `L_k` the cumulative
/// value share.
pub fn gini(values: &[f64], weights: &[f64]) -> Result<f64> {
    if values.len() != weights.len() || values.is_empty() {
        return Err(invalid!("gini needs matching, nonempty values and weights"));
    }
    if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(invalid!("gini needs nonnegative finite values"));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(invalid!("gini needs nonnegative finite weights"));
    }
    let tw: f64 = weights.iter().sum();
    let tv: f64 = values.iter().zip(weights).map(|(v, w)| v * w).sum();
    if !(tw > 0.0) || !(tv > 0.0) {
        return Err(invalid!("gini is undefined when all values are zero"));
    }
    if values.iter().all(|v| *v == values[0]) {
        return Ok(0.0);
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut prev = 0.0;
    let mut cum = 0.0;
    let mut acc = 0.0;
    for &i in &order {
        cum += values[i] * weights[i] / tv;
        acc += weights[i] / tw * (cum + prev);
        prev = cum;
    }
    Ok((1.0 - acc).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Covariates;

    #[test]
    fn vsl_arithmetic() {
        let spec = BasisSpec::products(&[(0, 1, true, false)]).unwrap();
        let units = VslUnits { mean_earnings: 50_000.0, risk_unit_scale: 1e5 };
        let th = Theta::new(vec![-0.002], vec![0.0], 0.6, 0.4, 0.0, 1.0).unwrap();
        assert!((vsl(&th, &spec, 1, &units).unwrap() - 1e7).abs() < 1e-6);
        let zero = Theta::new(vec![0.0], vec![0.0], 0.6, 0.4, 0.0, 1.0).unwrap();
        assert_eq!(vsl(&zero, &spec, 1, &units).unwrap(), 0.0);
        let other = BasisSpec::products(&[(1, 1, true, true)]).unwrap();
        assert!(vsl(&Theta::zeros(1, 0.5, 0.5, 0.0, 1.0), &other, 1, &units).is_err());
    }

    #[test]
    fn vsl_at_includes_interactions() {
        let spec = BasisSpec::products(&[(0, 1, true, false), (1, 1, true, true)]).unwrap();
        let th = Theta::new(vec![-0.002, 0.001], vec![0.0, 0.0], 0.5, 0.5, 0.0, 1.0).unwrap();
        let units = VslUnits { mean_earnings: 1.0, risk_unit_scale: 1.0 };
        let v = vsl_at(&th, &spec, 1, &[2.0], &[0.3], &units).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn gini_examples() {
        assert_eq!(gini(&[3.0, 3.0, 3.0], &[1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert!((gini(&[0.0, 1.0], &[1.0, 1.0]).unwrap() - 0.5).abs() < 1e-15);
        let v = [1.0, 4.0, 2.5, 9.0];
        let w = [0.1, 0.2, 0.3, 0.4];
        let scaled: Vec<f64> = v.iter().map(|x| 7.0 * x).collect();
        assert!((gini(&v, &w).unwrap() - gini(&scaled, &w).unwrap()).abs() < 1e-14);
        assert!(gini(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn gini_matches_mean_absolute_difference() {
        // Unweighted oracle: G = sum_ij |v_i - v_j| / (2 n^2 mean).
        let v = [1.0, 4.0, 2.5, 9.0, 0.5];
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let mad: f64 = v.iter().flat_map(|a| v.iter().map(move |b| (a - b).abs())).sum();
        let expected = mad / (2.0 * n * n * mean);
        assert!((gini(&v, &[1.0; 5]).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn hedonic_exact_fit() {
        let n = 8;
        let x = Covariates::new(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
        let y = Covariates::new(n, 1, (0..n).map(|i| ((i * 3) % 5) as f64).collect()).unwrap();
        let w = (0..n).map(|i| Some(1.0 + 0.2 * i as f64 + 0.05 * ((i * 3) % 5) as f64)).collect();
        let s = MatchSample::new(x, y, w).unwrap();
        let spec = HedonicSpec { worker_columns: vec![0], firm_columns: vec![0], risk_column: 0 };
        let r = hedonic_baseline(&s, &spec, &VslUnits { mean_earnings: 2.0, risk_unit_scale: 10.0 }).unwrap();
        assert!((r.risk_coefficient - 0.05).abs() < 1e-12);
        assert!((r.vsl_h - 1.0).abs() < 1e-10);
        assert!(r.fit.residuals.iter().all(|e| e.abs() < 1e-12));
    }

    fn cf_sample() -> (BasisSpec, Theta, MatchSample) {
        let spec = BasisSpec::products(&[(1, 1, true, true), (0, 1, true, false)]).unwrap();
        let th = Theta::new(vec![0.3, -0.5], vec![0.6, 0.0], 0.3, 0.2, 1.0, 0.1).unwrap();
        let n = 12;
        let x = Covariates::new(n, 1, (0..n).map(|i| (i % 4) as f64 * 0.5).collect()).unwrap();
        let y = Covariates::new(n, 1, (0..n).map(|i| ((i * 5) % 6) as f64 * 0.4).collect()).unwrap();
        let s = MatchSample::new(x, y, vec![None; n]).unwrap();
        (spec, th, s)
    }

    #[test]
    fn identity_counterfactual_is_null() {
        let (spec, th, s) = cf_sample();
        let cfg = SolverConfig::default();
        for tr in [FirmTransform::Identity, FirmTransform::Cap { column: 0, max: 100.0 }] {
            let r = counterfactual(&th, &spec, &s, &tr, TransferScale::Log, &cfg).unwrap();
            assert_eq!(r.before, r.after);
            assert_eq!(r.share_changed, 0.0);
            assert_eq!(r.mean_wage_change, 0.0);
            assert_eq!(r.gini_before, r.gini_after);
        }
    }

    #[test]
    fn binding_cap_moves_workers() {
        let (spec, th, s) = cf_sample();
        let cfg = SolverConfig::default();
        let r = counterfactual(&th, &spec, &s, &FirmTransform::Cap { column: 0, max: 1.0 }, TransferScale::Log, &cfg)
            .unwrap();
        assert!(r.share_changed > 0.0 && r.share_changed < 1.0);
        assert!(r.after.marginal_residual <= 1e-10);
        assert!(r.after.firm_mass.len() < r.before.firm_mass.len());
    }
}
