//! Sample log-likelihood of matches and transfers, its analytic gradient, and
//! the likelihood concentrated over `(sigma1, sigma2, t, s2)`.
//!
//! With weights `w_i` every observation enters with frequency `f_i = n w_i`,
//! so uniform weights give the usual unweighted sums.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::classes::ClassMap;
use crate::equilibrium::{potential_derivatives, solve_potentials_with, Potentials, SolverConfig};
use crate::error::{invalid, Error, Result};
use crate::model::{BasisSpec, MatchSample, Param, Theta};
use crate::ols::weighted_ols;

/// Floor applied to a profiled `s2` that collapses to zero.
pub const S2_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LikelihoodBreakdown {
    pub log_l1: f64,
    pub log_l2: f64,
    /// `n_obs log p + (n - n_obs) log(1 - p)` at `p = n_obs / n`; zero when
    /// no transfer is missing.
    pub binomial: f64,
    pub total: f64,
    pub n_observed_transfers: usize,
}

#[derive(Default)]
struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// `sum_i (phi_ii - a_i - b_i)`.
pub fn log_l1(phi: &DMatrix<f64>, pots: &Potentials) -> f64 {
    (0..phi.nrows()).map(|i| phi[(i, i)] - pots.a[i] - pots.b[i]).sum()
}

/// `-sum (W_i - w_i)^2 / (2 s2) - (n_obs / 2) log s2` over observed transfers.
pub fn log_l2(theta: &Theta, observed: &[Option<f64>], predicted: &[f64]) -> f64 {
    let mut ss = 0.0;
    let mut n_obs = 0usize;
    for (w, p) in observed.iter().zip(predicted) {
        if let Some(w) = w {
            ss += (w - p) * (w - p);
            n_obs += 1;
        }
    }
    if n_obs == 0 {
        return 0.0;
    }
    -ss / (2.0 * theta.s2) - 0.5 * n_obs as f64 * libm::log(theta.s2)
}

/// `n_obs log p + (n - n_obs) log(1 - p)` with `p = n_obs / n` and `0 log 0 = 0`.
pub fn binomial_term(n: usize, n_obs: usize) -> f64 {
    let xlogy = |k: usize, p: f64| if k == 0 { 0.0 } else { k as f64 * libm::log(p) };
    let p = n_obs as f64 / n as f64;
    xlogy(n_obs, p) + xlogy(n - n_obs, 1.0 - p)
}

pub fn log_likelihood(
    theta: &Theta,
    spec: &BasisSpec,
    sample: &MatchSample,
    config: &SolverConfig,
) -> Result<LikelihoodBreakdown> {
    Ok(LikelihoodEngine::new(spec, sample, *config)?.evaluate(theta)?.breakdown)
}

/// Analytic gradient in the `2K + 4` layout.
pub fn gradient(theta: &Theta, spec: &BasisSpec, sample: &MatchSample, config: &SolverConfig) -> Result<Vec<f64>> {
    let mut engine = LikelihoodEngine::new(spec, sample, *config)?;
    let ev = engine.evaluate(theta)?;
    engine.gradient(&ev)
}

pub fn concentrated_log_likelihood(
    amenity: &[f64],
    productivity: &[f64],
    spec: &BasisSpec,
    sample: &MatchSample,
    config: &SolverConfig,
) -> Result<Concentrated> {
    LikelihoodEngine::new(spec, sample, *config)?.concentrate(amenity, productivity, false)
}

/// Inner optimum of the concentrated likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InnerSolution {
    pub sigma1: f64,
    pub sigma2: f64,
    pub t: f64,
    pub s2: f64,
    /// Residuals vanished and `s2` was floored at [`S2_FLOOR`].
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Concentrated {
    pub breakdown: LikelihoodBreakdown,
    /// Absent when no transfer is observed.
    pub inner: Option<InnerSolution>,
    /// Gradient with respect to `(A, Gamma)` when requested.
    pub gradient: Option<Vec<f64>>,
}

/// Everything computed at one parameter value.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub theta: Theta,
    /// Observation-level potentials.
    pub potentials: Potentials,
    /// Model transfers `w_i(theta)`.
    pub wages: Vec<f64>,
    pub alpha_diag: Vec<f64>,
    pub gamma_diag: Vec<f64>,
    pub breakdown: LikelihoodBreakdown,
    class_potentials: Potentials,
    class_phi: DMatrix<f64>,
}

impl Evaluation {
    /// Class-level matching masses `pi_cd`.
    pub(crate) fn class_pi(&self) -> DMatrix<f64> {
        let p = &self.class_potentials;
        DMatrix::from_fn(self.class_phi.nrows(), self.class_phi.ncols(), |c, d| {
            libm::exp(self.class_phi[(c, d)] - p.a[c] - p.b[d])
        })
    }
}

/// Reusable evaluator for one `(spec, sample)` pair. Keeps the last
/// potentials to warm-start the next solve.
#[derive(Debug, Clone)]
pub struct LikelihoodEngine<'a> {
    spec: &'a BasisSpec,
    sample: &'a MatchSample,
    config: SolverConfig,
    classes: ClassMap,
    /// `phi_k` on the class table, one `C x D` matrix per basis.
    class_basis: Vec<DMatrix<f64>>,
    /// `phi_k(X_i, Y_i)`, `n x K`.
    diag_basis: DMatrix<f64>,
    freq: Vec<f64>,
    n_obs: usize,
    n_obs_weighted: f64,
    warm: Option<Potentials>,
    warm_start: bool,
}

impl<'a> LikelihoodEngine<'a> {
    pub fn new(spec: &'a BasisSpec, sample: &'a MatchSample, config: SolverConfig) -> Result<Self> {
        spec.check_dims(sample.workers().cols(), sample.firms().cols())?;
        let classes = ClassMap::build(sample);
        let k = spec.len();
        let (nc, nd) = (classes.workers.len(), classes.firms.len());
        let mut class_basis = vec![DMatrix::zeros(nc, nd); k];
        let mut buf = vec![0.0; k];
        for c in 0..nc {
            let x = sample.workers().row(classes.workers.representative[c]);
            for d in 0..nd {
                spec.eval_into(x, sample.firms().row(classes.firms.representative[d]), &mut buf);
                for (m, v) in class_basis.iter_mut().zip(&buf) {
                    m[(c, d)] = *v;
                }
            }
        }
        let n = sample.len();
        let mut diag_basis = DMatrix::zeros(n, k);
        for i in 0..n {
            spec.eval_into(sample.workers().row(i), sample.firms().row(i), &mut buf);
            for (kk, v) in buf.iter().enumerate() {
                diag_basis[(i, kk)] = *v;
            }
        }
        let freq: Vec<f64> = sample.frequency_weights().collect();
        let n_obs = sample.observed_transfers();
        let n_obs_weighted =
            sample.transfers().iter().zip(&freq).filter(|(t, _)| t.is_some()).map(|(_, f)| f).sum();
        Ok(Self {
            spec,
            sample,
            config,
            classes,
            class_basis,
            diag_basis,
            freq,
            n_obs,
            n_obs_weighted,
            warm: None,
            warm_start: true,
        })
    }

    pub fn spec(&self) -> &'a BasisSpec {
        self.spec
    }

    pub fn sample(&self) -> &'a MatchSample {
        self.sample
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn set_config(&mut self, config: SolverConfig) {
        self.config = config;
    }

    /// Enables or disables reuse of the previous potentials.
    pub fn set_warm_start(&mut self, on: bool) {
        self.warm_start = on;
        if !on {
            self.warm = None;
        }
    }

    pub fn n_observed(&self) -> usize {
        self.n_obs
    }

    pub fn classes(&self) -> &ClassMap {
        &self.classes
    }

    fn class_phi(&self, phi_coef: &[f64]) -> Result<DMatrix<f64>> {
        let (nc, nd) = (self.classes.workers.len(), self.classes.firms.len());
        let mut out: DMatrix<f64> = DMatrix::zeros(nc, nd);
        for (coef, m) in phi_coef.iter().zip(&self.class_basis) {
            if *coef != 0.0 {
                out += m * *coef;
            }
        }
        if let Some(pos) = out.iter().position(|v| !v.is_finite()) {
            let (c, d) = (pos % nc, pos / nc);
            let k = phi_coef
                .iter()
                .zip(&self.class_basis)
                .position(|(coef, m)| !(coef * m[(c, d)]).is_finite())
                .unwrap_or(phi_coef.len().saturating_sub(1));
            return Err(Error::NonFinitePhi {
                i: self.classes.workers.representative[c],
                j: self.classes.firms.representative[d],
                k,
            });
        }
        Ok(out)
    }

    /// Solves the potentials at `theta` and evaluates the likelihood.
    pub fn evaluate(&mut self, theta: &Theta) -> Result<Evaluation> {
        theta.validate()?;
        theta.check_spec(self.spec)?;
        let (am, gm, phi) = theta.effective(self.spec);
        let class_phi = self.class_phi(&phi)?;
        let warm = if self.warm_start { self.warm.as_ref() } else { None };
        let class_potentials = solve_potentials_with(
            &class_phi,
            &self.classes.workers.mass,
            &self.classes.firms.mass,
            &self.config,
            warm,
        )?;
        if self.warm_start {
            self.warm = Some(class_potentials.clone());
        }
        let potentials = self.classes.expand(&class_potentials);

        let n = self.sample.len();
        let alpha_diag: Vec<f64> = (0..n).map(|i| self.diag_basis.row(i).iter().zip(&am).map(|(b, c)| b * c).sum()).collect();
        let gamma_diag: Vec<f64> = (0..n).map(|i| self.diag_basis.row(i).iter().zip(&gm).map(|(b, c)| b * c).sum()).collect();
        let wages: Vec<f64> = (0..n)
            .map(|i| {
                theta.sigma1 * (gamma_diag[i] - potentials.b[i])
                    + theta.sigma2 * (potentials.a[i] - alpha_diag[i])
                    + theta.t
            })
            .collect();

        // Compensated sums: the optimizer compares values that differ by a
        // few ulps near the optimum.
        let mut l1 = Neumaier::default();
        let mut ss = Neumaier::default();
        for i in 0..n {
            let phi_ii = alpha_diag[i] + gamma_diag[i];
            l1.add(self.freq[i] * (phi_ii - potentials.a[i] - potentials.b[i]));
            if let Some(w) = self.sample.transfers()[i] {
                ss.add(self.freq[i] * (w - wages[i]) * (w - wages[i]));
            }
        }
        let (l1, ss) = (l1.value(), ss.value());
        let l2 = if self.n_obs == 0 { 0.0 } else { -ss / (2.0 * theta.s2) - 0.5 * self.n_obs_weighted * libm::log(theta.s2) };
        let binomial = binomial_term(n, self.n_obs);
        let breakdown = LikelihoodBreakdown {
            log_l1: l1,
            log_l2: l2,
            binomial,
            total: l1 + l2 + binomial,
            n_observed_transfers: self.n_obs,
        };
        Ok(Evaluation {
            theta: theta.clone(),
            potentials,
            wages,
            alpha_diag,
            gamma_diag,
            breakdown,
            class_potentials,
            class_phi,
        })
    }

    /// Observation-level `(Da, Db)`, each `n x K`.
    pub fn potential_derivatives(&self, ev: &Evaluation) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let (da, db) = self.class_derivatives(ev, &ev.class_pi())?;
        let n = self.sample.len();
        let k = self.spec.len();
        let w = &self.classes.workers.class_of;
        let f = &self.classes.firms.class_of;
        Ok((DMatrix::from_fn(n, k, |i, kk| da[(w[i], kk)]), DMatrix::from_fn(n, k, |i, kk| db[(f[i], kk)])))
    }

    fn class_derivatives(&self, _ev: &Evaluation, pi: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let (nc, nd) = pi.shape();
        let k = self.spec.len();
        let mut e = DMatrix::zeros(nc, k);
        let mut f = DMatrix::zeros(nd, k);
        for (kk, b) in self.class_basis.iter().enumerate() {
            for d in 0..nd {
                for c in 0..nc {
                    let v = pi[(c, d)] * b[(c, d)];
                    e[(c, kk)] += v;
                    f[(d, kk)] += v;
                }
            }
        }
        potential_derivatives(pi, e, &f)
    }

    /// Analytic gradient of the total log-likelihood at `ev`, `2K + 4` layout.
    /// The binomial terms do not depend on the parameters.
    pub fn gradient(&self, ev: &Evaluation) -> Result<Vec<f64>> {
        let th = &ev.theta;
        let k = self.spec.len();
        let n = self.sample.len();
        let pi = ev.class_pi();
        let mut g = vec![0.0; 2 * k + 4];

        // Matching part: sum_i f_i phi_k(ii) - n sum_cd pi_cd phi_k(c, d).
        for kk in 0..k {
            let own: f64 = (0..n).map(|i| self.freq[i] * self.diag_basis[(i, kk)]).sum();
            let model: f64 = pi.iter().zip(self.class_basis[kk].iter()).map(|(p, b)| p * b).sum();
            let v = own - n as f64 * model;
            g[Param::Amenity(kk).index(k)] = v;
            g[Param::Productivity(kk).index(k)] = v;
        }

        if self.n_obs > 0 {
            let (da, db) = self.class_derivatives(ev, &pi)?;
            let wc = &self.classes.workers.class_of;
            let fc = &self.classes.firms.class_of;
            let inv = 1.0 / th.s2;
            let mut ss = 0.0;
            for i in 0..n {
                let Some(w) = self.sample.transfers()[i] else { continue };
                let fr = self.freq[i] * (w - ev.wages[i]) * inv;
                ss += self.freq[i] * (w - ev.wages[i]) * (w - ev.wages[i]);
                for kk in 0..k {
                    let (dai, dbi, phik) = (da[(wc[i], kk)], db[(fc[i], kk)], self.diag_basis[(i, kk)]);
                    g[Param::Amenity(kk).index(k)] += fr * (th.sigma2 * (dai - phik) - th.sigma1 * dbi);
                    g[Param::Productivity(kk).index(k)] += fr * (th.sigma1 * (phik - dbi) + th.sigma2 * dai);
                }
                g[Param::Sigma1.index(k)] += fr * (ev.gamma_diag[i] - ev.potentials.b[i]);
                g[Param::Sigma2.index(k)] += fr * (ev.potentials.a[i] - ev.alpha_diag[i]);
                g[Param::T.index(k)] += fr;
            }
            g[Param::S2.index(k)] = ss / (2.0 * th.s2 * th.s2) - self.n_obs_weighted / (2.0 * th.s2);
        }

        for kk in 0..k {
            if !self.spec.alpha_mask()[kk] {
                g[Param::Amenity(kk).index(k)] = 0.0;
            }
            if !self.spec.gamma_mask()[kk] {
                g[Param::Productivity(kk).index(k)] = 0.0;
            }
        }
        Ok(g)
    }

    pub fn value_and_gradient(&mut self, theta: &Theta) -> Result<(Evaluation, Vec<f64>)> {
        let ev = self.evaluate(theta)?;
        let g = self.gradient(&ev)?;
        Ok((ev, g))
    }

    /// Likelihood profiled over `(sigma1, sigma2, t, s2)` at fixed `(A, Gamma)`.
    pub fn concentrate(&mut self, amenity: &[f64], productivity: &[f64], with_gradient: bool) -> Result<Concentrated> {
        let k = self.spec.len();
        if amenity.len() != k || productivity.len() != k {
            return Err(invalid!("expected {k} coefficients per side"));
        }
        let probe = Theta::new(amenity.to_vec(), productivity.to_vec(), 0.0, 0.0, 0.0, 1.0)?;
        let ev = self.evaluate(&probe)?;
        if self.n_obs == 0 {
            let gradient = if with_gradient { Some(self.gradient(&ev)?[..2 * k].to_vec()) } else { None };
            return Ok(Concentrated { breakdown: ev.breakdown, inner: None, gradient });
        }
        let inner = self.inner_fit(&ev)?;
        let theta = Theta::new(amenity.to_vec(), productivity.to_vec(), inner.sigma1, inner.sigma2, inner.t, inner.s2)?;
        // Same Phi, so the warm start returns the same potentials at once.
        let ev = self.evaluate(&theta)?;
        let gradient = if with_gradient { Some(self.gradient(&ev)?[..2 * k].to_vec()) } else { None };
        Ok(Concentrated { breakdown: ev.breakdown, inner: Some(inner), gradient })
    }

    /// Least squares of `W` on `(gamma_ii - b_i, a_i - alpha_ii, 1)` with
    /// `sigma1, sigma2 >= 0` enforced by checking every active set.
    fn inner_fit(&self, ev: &Evaluation) -> Result<InnerSolution> {
        let rows: Vec<usize> = (0..self.sample.len()).filter(|&i| self.sample.transfers()[i].is_some()).collect();
        let y: Vec<f64> = rows.iter().map(|&i| self.sample.transfers()[i].unwrap_or(0.0)).collect();
        let w: Vec<f64> = rows.iter().map(|&i| self.freq[i]).collect();
        let r1: Vec<f64> = rows.iter().map(|&i| ev.gamma_diag[i] - ev.potentials.b[i]).collect();
        let r2: Vec<f64> = rows.iter().map(|&i| ev.potentials.a[i] - ev.alpha_diag[i]).collect();
        let m = rows.len();
        let fit = |use1: bool, use2: bool| -> Result<(f64, f64, f64, f64)> {
            let mut cols: Vec<&[f64]> = Vec::new();
            if use1 {
                cols.push(&r1);
            }
            if use2 {
                cols.push(&r2);
            }
            let p = cols.len() + 1;
            let x = DMatrix::from_fn(m, p, |i, j| if j < cols.len() { cols[j][i] } else { 1.0 });
            let f = weighted_ols(&x, &y, &w)?;
            let mut it = f.coef.iter().copied();
            let s1 = if use1 { it.next().unwrap_or(0.0) } else { 0.0 };
            let s2 = if use2 { it.next().unwrap_or(0.0) } else { 0.0 };
            let t = it.next().unwrap_or(0.0);
            let rss: f64 = (0..m).map(|i| w[i] * libm::pow(y[i] - s1 * r1[i] - s2 * r2[i] - t, 2.0)).sum();
            Ok((s1, s2, t, rss))
        };
        let full = fit(true, true)?;
        let best = if full.0 >= 0.0 && full.1 >= 0.0 {
            full
        } else {
            let mut best: Option<(f64, f64, f64, f64)> = None;
            for (u1, u2) in [(false, true), (true, false), (false, false)] {
                // A face whose own design is degenerate cannot hold the optimum
                // strictly better than its sub-faces, which are also checked.
                let Ok(c) = fit(u1, u2) else { continue };
                if c.0 < 0.0 || c.1 < 0.0 {
                    continue;
                }
                if best.map_or(true, |b| c.3 < b.3) {
                    best = Some(c);
                }
            }
            best.ok_or_else(|| Error::Numeric("no feasible inner least-squares solution".into()))?
        };
        let raw_s2 = best.3 / self.n_obs_weighted;
        let degenerate = !(raw_s2 > S2_FLOOR);
        Ok(InnerSolution {
            sigma1: best.0,
            sigma2: best.1,
            t: best.2,
            s2: if degenerate { S2_FLOOR } else { raw_s2 },
            degenerate,
        })
    }
}
