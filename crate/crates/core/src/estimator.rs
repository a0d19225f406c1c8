//! Maximum-likelihood estimation: full, concentrated and matching-only.
//!
//! The optimizer minimizes `-log L / n` in an unconstrained parameterization
//! (`sigma = exp(u)` or `softplus(u)`, `s2 = exp(v)`). Convergence is judged
//! on the projected gradient of `log L / n` with respect to the original
//! parameters.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::equilibrium::SolverConfig;
use crate::error::{config_err, invalid, Error, Result};
use crate::likelihood::{LikelihoodBreakdown, LikelihoodEngine};
use crate::linalg::spd_inverse;
use crate::model::{BasisSpec, MatchSample, Param, Theta};
use crate::optim::{minimize, BfgsConfig, BfgsResult, Status};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SigmaParam {
    Exp,
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum HessianKind {
    /// Hessian of the full likelihood over all free parameters.
    Full,
    /// Hessian of the concentrated likelihood over `(A, Gamma)` only.
    Concentrated,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EstimatorOptions {
    pub solver: SolverConfig,
    pub optimizer: BfgsConfig,
    pub sigma_param: SigmaParam,
    pub standard_errors: bool,
    pub hessian: HessianKind,
    /// Relative central-difference step for the Hessian.
    pub hessian_step: f64,
    /// `sigma` below this is treated as sitting on the boundary.
    pub boundary_threshold: f64,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            optimizer: BfgsConfig::default(),
            sigma_param: SigmaParam::Exp,
            standard_errors: true,
            hessian: HessianKind::Full,
            hessian_step: 1e-5,
            boundary_threshold: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Method {
    Full,
    Concentrated,
    MatchingOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum EstimationStatus {
    Converged,
    NotConverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum HessianStatus {
    PositiveDefinite,
    NotPositiveDefinite,
    NotComputed,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Convergence {
    pub status: EstimationStatus,
    pub optimizer_status: Status,
    pub iterations: usize,
    /// Projected gradient sup-norm of `log L / n` at the estimate.
    pub gradient_norm: f64,
    /// Log-likelihood at every accepted iterate of the final fit.
    pub objective_trace: Vec<f64>,
    /// Scale parameters fixed at zero after a boundary refit.
    pub pinned: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EstimationReport {
    pub method: Method,
    pub parameter_names: Vec<String>,
    pub theta_hat: Theta,
    /// Whether each coordinate of `theta_hat` is identified by the data used.
    pub identified: Vec<bool>,
    /// Aligned with the `theta` layout; absent for fixed, masked or
    /// unidentified coordinates and when the Hessian is not usable.
    pub std_errors: Vec<Option<f64>>,
    pub phi_hat: Vec<f64>,
    pub phi_std_errors: Vec<Option<f64>>,
    /// False when only matches were used, so only `Phi` is estimated.
    pub split_identified: bool,
    pub loglik: LikelihoodBreakdown,
    pub r_squared: Option<f64>,
    pub convergence: Convergence,
    pub hessian_status: HessianStatus,
    /// Covariance over the coordinates with standard errors, in layout order.
    pub covariance: Option<Vec<Vec<f64>>>,
    pub n: usize,
    pub config_echo: EstimatorOptions,
}

impl EstimationReport {
    pub fn converged(&self) -> bool {
        self.convergence.status == EstimationStatus::Converged
    }
}

/// Rejects basis sets the likelihood cannot identify.
fn check_identifiable(spec: &BasisSpec, sample: &MatchSample) -> Result<()> {
    spec.check_dims(sample.workers().cols(), sample.firms().cols())?;
    for term in spec.terms() {
        if !term.uses_worker() && !term.uses_firm() {
            return Err(config_err!(
                "basis {} is constant; it is absorbed by the potentials and cannot be estimated",
                term.label()
            ));
        }
    }
    let k = spec.len();
    if sample.len() < k + 4 {
        return Err(invalid!("need at least K + 4 = {} matches, have {}", k + 4, sample.len()));
    }
    Ok(())
}

/// Maps free parameters to and from the unconstrained optimizer space.
#[derive(Debug, Clone)]
struct Layout {
    k: usize,
    /// Theta indices being optimized.
    free: Vec<usize>,
    sigma: SigmaParam,
    /// `(b, a)` in `t = tau + b sigma1 - a sigma2`; the optimizer works on
    /// `tau`, which decouples the intercept from the scale parameters.
    shift: (f64, f64),
}

fn softplus(u: f64) -> f64 {
    if u > 30.0 {
        u
    } else {
        libm::log1p(libm::exp(u))
    }
}

fn softplus_inv(s: f64) -> f64 {
    if s > 30.0 {
        s
    } else {
        libm::log(libm::expm1(s))
    }
}

impl Layout {
    fn new(spec: &BasisSpec, pinned: &[Param], sigma: SigmaParam) -> Self {
        let k = spec.len();
        let mut free = Vec::new();
        for kk in 0..k {
            if spec.alpha_mask()[kk] {
                free.push(Param::Amenity(kk).index(k));
            }
        }
        for kk in 0..k {
            if spec.gamma_mask()[kk] {
                free.push(Param::Productivity(kk).index(k));
            }
        }
        for p in [Param::Sigma1, Param::Sigma2, Param::T, Param::S2] {
            if !pinned.contains(&p) {
                free.push(p.index(k));
            }
        }
        Self { k, free, sigma, shift: (0.0, 0.0) }
    }

    fn with_shift(mut self, b: f64, a: f64) -> Self {
        self.shift = (b, a);
        self
    }

    fn t_free(&self) -> bool {
        self.free.contains(&Param::T.index(self.k))
    }

    fn is_sigma(&self, idx: usize) -> bool {
        idx == Param::Sigma1.index(self.k) || idx == Param::Sigma2.index(self.k)
    }

    fn to_u(&self, theta: &Theta) -> Vec<f64> {
        let mut v = theta.to_vec();
        let (cb, ca) = self.shift;
        v[Param::T.index(self.k)] -= cb * theta.sigma1 - ca * theta.sigma2;
        self.free
            .iter()
            .map(|&i| {
                if self.is_sigma(i) {
                    match self.sigma {
                        SigmaParam::Exp => libm::log(v[i]),
                        SigmaParam::Softplus => softplus_inv(v[i]),
                    }
                } else if i == Param::S2.index(self.k) {
                    libm::log(v[i])
                } else {
                    v[i]
                }
            })
            .collect()
    }

    fn to_theta(&self, u: &[f64], template: &Theta) -> Result<Theta> {
        let mut v = template.to_vec();
        for (&i, &x) in self.free.iter().zip(u) {
            v[i] = if self.is_sigma(i) {
                match self.sigma {
                    SigmaParam::Exp => libm::exp(x),
                    SigmaParam::Softplus => softplus(x),
                }
            } else if i == Param::S2.index(self.k) {
                libm::exp(x)
            } else {
                x
            };
        }
        if self.t_free() {
            let (cb, ca) = self.shift;
            let (s1, s2) = (Param::Sigma1.index(self.k), Param::Sigma2.index(self.k));
            v[Param::T.index(self.k)] += cb * v[s1] - ca * v[s2];
        }
        Theta::from_slice(self.k, &v)
    }

    /// Gradient with respect to `u` from the gradient with respect to theta.
    fn chain(&self, u: &[f64], theta: &Theta, g: &[f64]) -> Vec<f64> {
        let v = theta.to_vec();
        let mut g = g.to_vec();
        if self.t_free() {
            let (cb, ca) = self.shift;
            let gt = g[Param::T.index(self.k)];
            g[Param::Sigma1.index(self.k)] += cb * gt;
            g[Param::Sigma2.index(self.k)] -= ca * gt;
        }
        self.free
            .iter()
            .zip(u)
            .map(|(&i, &x)| g[i] * self.jacobian_at(i, x, &v))
            .collect()
    }

    /// `d theta_i / d u_i`, ignoring the intercept shift.
    fn jacobian(&self, i: usize, x: f64, theta: &Theta) -> f64 {
        self.jacobian_at(i, x, &theta.to_vec())
    }

    fn jacobian_at(&self, i: usize, x: f64, v: &[f64]) -> f64 {
        if self.is_sigma(i) {
            match self.sigma {
                SigmaParam::Exp => v[i],
                SigmaParam::Softplus => 1.0 / (1.0 + libm::exp(-x)),
            }
        } else if i == Param::S2.index(self.k) {
            v[i]
        } else {
            1.0
        }
    }

    /// Theta gradient of `log L` from the optimizer gradient of `-log L / n`.
    fn unchain(&self, u: &[f64], theta: &Theta, gu: &[f64], n: f64) -> Vec<f64> {
        let mut g = vec![0.0; 2 * self.k + 4];
        for (&i, (&x, gi)) in self.free.iter().zip(u.iter().zip(gu)) {
            let d = self.jacobian(i, x, theta);
            g[i] = if d > 0.0 { -gi * n / d } else { 0.0 };
        }
        if self.t_free() {
            let (cb, ca) = self.shift;
            let gt = g[Param::T.index(self.k)];
            g[Param::Sigma1.index(self.k)] -= cb * gt;
            g[Param::Sigma2.index(self.k)] += ca * gt;
        }
        g
    }

    /// Sup-norm of the projected gradient; a scale parameter at the boundary
    /// whose gradient points outward counts as stationary.
    fn projected_norm(&self, theta: &Theta, g: &[f64], n: f64, boundary: f64) -> f64 {
        let v = theta.to_vec();
        self.free
            .iter()
            .map(|&i| {
                if self.is_sigma(i) && v[i] <= boundary && g[i] < 0.0 {
                    0.0
                } else {
                    (g[i] / n).abs()
                }
            })
            .fold(0.0, f64::max)
    }
}

/// BFGS restarts from a profiled point after a stalled line search.
const PROFILE_RESTARTS: usize = 3;

/// Resolution of an average log-likelihood of magnitude `f`: 64 ulps.
pub fn rounding_floor(f: f64) -> f64 {
    64.0 * f64::EPSILON * (1.0 + f.abs())
}

/// Means of `b_i` and `a_i` over rows with an observed transfer.
fn observed_mean(sample: &MatchSample, b: &[f64], a: &[f64]) -> (f64, f64) {
    let (mut sw, mut sb, mut sa) = (0.0, 0.0, 0.0);
    for (i, (t, w)) in sample.transfers().iter().zip(sample.weights()).enumerate() {
        if t.is_some() {
            sw += w;
            sb += w * b[i];
            sa += w * a[i];
        }
    }
    if sw > 0.0 {
        (sb / sw, sa / sw)
    } else {
        (0.0, 0.0)
    }
}

/// Starting values: `Phi = 0`, `sigma1 = sigma2 = 0.25`, `t` and `s2` the
/// weighted mean and variance of the observed transfers.
pub fn initial_theta(spec: &BasisSpec, sample: &MatchSample) -> Theta {
    let mut sw = 0.0;
    let mut swy = 0.0;
    for (t, w) in sample.transfers().iter().zip(sample.weights()) {
        if let Some(y) = t {
            sw += w;
            swy += w * y;
        }
    }
    let mean = if sw > 0.0 { swy / sw } else { 0.0 };
    let mut var = 0.0;
    for (t, w) in sample.transfers().iter().zip(sample.weights()) {
        if let Some(y) = t {
            var += w * (y - mean) * (y - mean);
        }
    }
    let var = if sw > 0.0 { var / sw } else { 1.0 };
    Theta::zeros(spec.len(), 0.25, 0.25, mean, if var > 0.0 { var } else { 1.0 })
}

fn pinned_names(pinned: &[Param]) -> Vec<String> {
    pinned
        .iter()
        .map(|p| String::from(if *p == Param::Sigma1 { "sigma1" } else { "sigma2" }))
        .collect()
}

struct Fit {
    theta: Theta,
    loglik: LikelihoodBreakdown,
    result_status: Status,
    iterations: usize,
    measure: f64,
    trace: Vec<f64>,
    pinned: Vec<Param>,
}

fn fit_full(
    engine: &mut LikelihoodEngine<'_>,
    start: &Theta,
    pinned: &[Param],
    opts: &EstimatorOptions,
) -> Result<Fit> {
    let mut template = start.clone();
    for p in pinned {
        template.set(*p, 0.0);
    }
    let n = engine.sample().len() as f64;
    let (cb, ca) = {
        let ev = engine.evaluate(&template)?;
        observed_mean(engine.sample(), &ev.potentials.b, &ev.potentials.a)
    };
    let layout = Layout::new(engine.spec(), pinned, opts.sigma_param).with_shift(cb, ca);
    let u0 = layout.to_u(&template);
    let boundary = opts.boundary_threshold;
    let run = |engine: &mut LikelihoodEngine<'_>, u0: &[f64]| {
        minimize(
            u0,
            |u| {
                let th = layout.to_theta(u, &template)?;
                let (ev, g) = engine.value_and_gradient(&th)?;
                let gu = layout.chain(u, &th, &g);
                Ok((-ev.breakdown.total / n, gu.iter().map(|v| -v / n).collect()))
            },
            |u, gu| {
                let Ok(th) = layout.to_theta(u, &template) else { return f64::INFINITY };
                let g = layout.unchain(u, &th, gu, n);
                layout.projected_norm(&th, &g, n, boundary)
            },
            &opts.optimizer,
        )
    };
    let mut res = run(engine, &u0)?;
    // Near the optimum the scale and intercept directions are far more curved
    // than the rest, so their remaining gain falls below the resolution of
    // the objective and the line search stalls. Maximizing them out at the
    // current Phi is exact and lets BFGS resume; the step is accepted unless
    // it loses more than rounding.
    if res.status == Status::LineSearchFailed && pinned.is_empty() {
        for _ in 0..PROFILE_RESTARTS {
            if res.status != Status::LineSearchFailed {
                break;
            }
            let th = layout.to_theta(&res.x, &template)?;
            let Ok(c) = engine.concentrate(&th.amenity, &th.productivity, false) else { break };
            let Some(inner) = c.inner.filter(|s| s.sigma1 > 0.0 && s.sigma2 > 0.0 && !s.degenerate) else { break };
            if -c.breakdown.total / n > res.f + rounding_floor(res.f) {
                break;
            }
            let profiled = Theta { sigma1: inner.sigma1, sigma2: inner.sigma2, t: inner.t, s2: inner.s2, ..th };
            let next = run(engine, &layout.to_u(&profiled))?;
            let mut trace = core::mem::take(&mut res.trace);
            trace.extend_from_slice(&next.trace);
            res = BfgsResult { iterations: res.iterations + next.iterations + 1, trace, ..next };
        }
    }
    let theta = layout.to_theta(&res.x, &template)?;
    let ev = engine.evaluate(&theta)?;
    Ok(Fit {
        theta,
        loglik: ev.breakdown,
        result_status: res.status,
        iterations: res.iterations,
        measure: res.measure,
        trace: res.trace.iter().map(|f| -f * n).collect(),
        pinned: pinned.to_vec(),
    })
}

/// Full-information maximum likelihood over all parameters.
pub fn estimate(sample: &MatchSample, spec: &BasisSpec, opts: &EstimatorOptions) -> Result<EstimationReport> {
    check_identifiable(spec, sample)?;
    if sample.observed_transfers() == 0 {
        return estimate_matching_only(sample, spec, opts);
    }
    let mut engine = LikelihoodEngine::new(spec, sample, tight(opts))?;
    let start = initial_theta(spec, sample);
    let mut best = fit_full(&mut engine, &start, &[], opts)?;

    // Boundary refits for scale parameters heading to zero.
    let converged = best.result_status == Status::Converged;
    let limit = if converged { opts.boundary_threshold } else { 1e-4 };
    let candidates: Vec<Param> =
        [Param::Sigma1, Param::Sigma2].into_iter().filter(|p| best.theta.get(*p) < limit).collect();
    if !candidates.is_empty() {
        let refit = fit_full(&mut engine, &best.theta, &candidates, opts)?;
        let better = refit.loglik.total >= best.loglik.total - 1e-9 * best.loglik.total.abs().max(1.0);
        if better && (refit.result_status == Status::Converged || !converged) {
            best = refit;
        }
    }
    finish_report(&mut engine, best, Method::Full, opts)
}

fn finish_report(
    engine: &mut LikelihoodEngine<'_>,
    fit: Fit,
    method: Method,
    opts: &EstimatorOptions,
) -> Result<EstimationReport> {
    let spec = engine.spec().clone();
    let sample = engine.sample();
    let k = spec.len();
    let n = sample.len();
    let ev = engine.evaluate(&fit.theta)?;
    let r_squared = r_squared(sample, &ev.wages);
    let layout = Layout::new(&spec, &fit.pinned, opts.sigma_param);

    let mut std_errors = vec![None; 2 * k + 4];
    let mut covariance = None;
    let mut hessian_status = HessianStatus::NotComputed;
    if opts.standard_errors {
        let free: Vec<usize> = match opts.hessian {
            HessianKind::Full => layout.free.clone(),
            HessianKind::Concentrated => layout.free.iter().copied().filter(|&i| i < 2 * k).collect(),
        };
        let h = match opts.hessian {
            HessianKind::Full => full_hessian(engine, &fit.theta, &free, opts)?,
            HessianKind::Concentrated => concentrated_hessian(engine, &fit.theta, &free, opts)?,
        };
        match covariance_from_hessian(&h) {
            Some(cov) => {
                hessian_status = HessianStatus::PositiveDefinite;
                for (a, &i) in free.iter().enumerate() {
                    std_errors[i] = Some(libm::sqrt(cov[(a, a)]));
                }
                let mut full_cov = vec![vec![0.0; 2 * k + 4]; 2 * k + 4];
                for (a, &i) in free.iter().enumerate() {
                    for (b, &j) in free.iter().enumerate() {
                        full_cov[i][j] = cov[(a, b)];
                    }
                }
                covariance = Some(full_cov);
            }
            None => hessian_status = HessianStatus::NotPositiveDefinite,
        }
    }
    let phi_hat = fit.theta.masked(&spec).phi();
    let phi_std_errors = (0..k)
        .map(|kk| {
            let cov = covariance.as_ref()?;
            let (ia, ig) = (Param::Amenity(kk).index(k), Param::Productivity(kk).index(k));
            let (ua, ug) = (spec.alpha_mask()[kk], spec.gamma_mask()[kk]);
            std_errors[if ua { ia } else { ig }]?;
            let mut var = 0.0;
            if ua {
                var += cov[ia][ia];
            }
            if ug {
                var += cov[ig][ig];
            }
            if ua && ug {
                var += 2.0 * cov[ia][ig];
            }
            (var > 0.0).then(|| libm::sqrt(var))
        })
        .collect();
    let mut identified = vec![true; 2 * k + 4];
    for kk in 0..k {
        identified[Param::Amenity(kk).index(k)] = spec.alpha_mask()[kk];
        identified[Param::Productivity(kk).index(k)] = spec.gamma_mask()[kk];
    }
    let status =
        if fit.result_status == Status::Converged { EstimationStatus::Converged } else { EstimationStatus::NotConverged };
    Ok(EstimationReport {
        method,
        parameter_names: spec.parameter_names(),
        theta_hat: fit.theta,
        identified,
        std_errors,
        phi_hat,
        phi_std_errors,
        split_identified: true,
        loglik: fit.loglik,
        r_squared,
        convergence: Convergence {
            status,
            optimizer_status: fit.result_status,
            iterations: fit.iterations,
            gradient_norm: fit.measure,
            objective_trace: fit.trace,
            pinned: pinned_names(&fit.pinned),
        },
        hessian_status,
        covariance,
        n,
        config_echo: *opts,
    })
}

/// `1 - sum f (W - w)^2 / sum f (W - mean W)^2` over observed transfers.
pub fn r_squared(sample: &MatchSample, wages: &[f64]) -> Option<f64> {
    let obs: Vec<(f64, f64, f64)> = sample
        .transfers()
        .iter()
        .zip(wages)
        .zip(sample.weights())
        .filter_map(|((t, w), f)| t.map(|y| (y, *w, *f)))
        .collect();
    if obs.is_empty() {
        return None;
    }
    let sf: f64 = obs.iter().map(|o| o.2).sum();
    let mean = obs.iter().map(|o| o.0 * o.2).sum::<f64>() / sf;
    let tss: f64 = obs.iter().map(|o| o.2 * libm::pow(o.0 - mean, 2.0)).sum();
    let rss: f64 = obs.iter().map(|o| o.2 * libm::pow(o.0 - o.1, 2.0)).sum();
    (tss > 0.0).then(|| 1.0 - rss / tss)
}

/// Central finite-difference Jacobian of `grad` at `x`, symmetrized.
/// `grad` returns the gradient restricted to the same coordinates.
pub fn fd_hessian<G>(x: &[f64], rel_step: f64, mut grad: G) -> Result<DMatrix<f64>>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let m = x.len();
    let mut h = DMatrix::zeros(m, m);
    for j in 0..m {
        let step = rel_step * x[j].abs().max(1.0);
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += step;
        xm[j] -= step;
        let gp = grad(&xp)?;
        let gm = grad(&xm)?;
        for i in 0..m {
            h[(i, j)] = (gp[i] - gm[i]) / (2.0 * step);
        }
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// `(-H)^-1` when `-H` is positive definite.
pub fn covariance_from_hessian(h: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if h.nrows() == 0 {
        return None;
    }
    spd_inverse(-h.clone()).ok()
}

/// Potential tolerance used by the estimators. At the default solver
/// tolerance the objective is only resolved to about `1e-12`, too coarse for
/// the stationarity test on the curved scale directions.
fn tight(opts: &EstimatorOptions) -> SolverConfig {
    SolverConfig { tol: opts.solver.tol.min(1e-13), max_iter: opts.solver.max_iter.max(100_000) }
}

fn full_hessian(
    engine: &mut LikelihoodEngine<'_>,
    theta: &Theta,
    free: &[usize],
    opts: &EstimatorOptions,
) -> Result<DMatrix<f64>> {
    let k = theta.k();
    let base = theta.to_vec();
    let x0: Vec<f64> = free.iter().map(|&i| base[i]).collect();
    fd_hessian(&x0, opts.hessian_step, |x| {
        let mut v = base.clone();
        for (&i, &xi) in free.iter().zip(x) {
            v[i] = xi;
        }
        let th = Theta::from_slice(k, &v)?;
        let (_, g) = engine.value_and_gradient(&th)?;
        Ok(free.iter().map(|&i| g[i]).collect())
    })
}

fn concentrated_hessian(
    engine: &mut LikelihoodEngine<'_>,
    theta: &Theta,
    free: &[usize],
    opts: &EstimatorOptions,
) -> Result<DMatrix<f64>> {
    let k = theta.k();
    let base = theta.to_vec();
    let x0: Vec<f64> = free.iter().map(|&i| base[i]).collect();
    fd_hessian(&x0, opts.hessian_step, |x| {
        let mut v = base[..2 * k].to_vec();
        for (&i, &xi) in free.iter().zip(x) {
            v[i] = xi;
        }
        let c = engine.concentrate(&v[..k], &v[k..], true)?;
        let g = c.gradient.unwrap_or_default();
        Ok(free.iter().map(|&i| g[i]).collect())
    })
}

/// Standard errors at `theta` from the full-likelihood Hessian. Scale
/// parameters equal to zero are treated as fixed and get no standard error.
pub fn standard_errors(
    theta: &Theta,
    spec: &BasisSpec,
    sample: &MatchSample,
    opts: &EstimatorOptions,
) -> Result<(Vec<Option<f64>>, HessianStatus)> {
    let pinned: Vec<Param> = [Param::Sigma1, Param::Sigma2].into_iter().filter(|p| theta.get(*p) == 0.0).collect();
    let layout = Layout::new(spec, &pinned, opts.sigma_param);
    let mut engine = LikelihoodEngine::new(spec, sample, tight(opts))?;
    let free: Vec<usize> = if sample.observed_transfers() == 0 {
        return Err(invalid!("standard errors of the full likelihood need observed transfers"));
    } else {
        layout.free.clone()
    };
    let h = full_hessian(&mut engine, theta, &free, opts)?;
    let mut se = vec![None; 2 * theta.k() + 4];
    match covariance_from_hessian(&h) {
        Some(cov) => {
            for (a, &i) in free.iter().enumerate() {
                se[i] = Some(libm::sqrt(cov[(a, a)]));
            }
            Ok((se, HessianStatus::PositiveDefinite))
        }
        None => Ok((se, HessianStatus::NotPositiveDefinite)),
    }
}

/// Profiles the likelihood over `(sigma1, sigma2, t, s2)` and maximizes over
/// `(A, Gamma)` only.
pub fn estimate_concentrated(
    sample: &MatchSample,
    spec: &BasisSpec,
    opts: &EstimatorOptions,
) -> Result<EstimationReport> {
    check_identifiable(spec, sample)?;
    if sample.observed_transfers() == 0 {
        return estimate_matching_only(sample, spec, opts);
    }
    let k = spec.len();
    let mut engine = LikelihoodEngine::new(spec, sample, tight(opts))?;
    let outer: Vec<usize> = Layout::new(spec, &[], opts.sigma_param).free.into_iter().filter(|&i| i < 2 * k).collect();
    let n = sample.len() as f64;

    // At Phi = 0 the inner regressors are collinear with the intercept, so
    // start from the matching-only Phi split across the active sides.
    let start = concentrated_start(&mut engine, spec, &outer, opts)?;
    let res = minimize(
        &start,
        |x| {
            let mut v = vec![0.0; 2 * k];
            for (&i, &xi) in outer.iter().zip(x) {
                v[i] = xi;
            }
            let c = engine.concentrate(&v[..k], &v[k..], true)?;
            let g = c.gradient.unwrap_or_default();
            Ok((-c.breakdown.total / n, outer.iter().map(|&i| -g[i] / n).collect()))
        },
        |_, g| g.iter().fold(0.0, |m, v| f64::max(m, v.abs())),
        &opts.optimizer,
    )?;
    let mut v = vec![0.0; 2 * k];
    for (&i, &xi) in outer.iter().zip(&res.x) {
        v[i] = xi;
    }
    let c = engine.concentrate(&v[..k], &v[k..], false)?;
    let inner = c.inner.ok_or_else(|| Error::Numeric("inner solution missing".into()))?;
    let theta = Theta::new(v[..k].to_vec(), v[k..].to_vec(), inner.sigma1, inner.sigma2, inner.t, inner.s2)?;
    let pinned: Vec<Param> = [Param::Sigma1, Param::Sigma2].into_iter().filter(|p| theta.get(*p) == 0.0).collect();
    let fit = Fit {
        theta,
        loglik: c.breakdown,
        result_status: res.status,
        iterations: res.iterations,
        measure: res.measure,
        trace: res.trace.iter().map(|f| -f * n).collect(),
        pinned,
    };
    finish_report(&mut engine, fit, Method::Concentrated, opts)
}

fn concentrated_start(
    engine: &mut LikelihoodEngine<'_>,
    spec: &BasisSpec,
    outer: &[usize],
    opts: &EstimatorOptions,
) -> Result<Vec<f64>> {
    let k = spec.len();
    let phi = matching_only_phi(engine, spec, opts)?.0;
    let mut v = vec![0.0; 2 * k];
    for kk in 0..k {
        let (ua, ug) = (spec.alpha_mask()[kk], spec.gamma_mask()[kk]);
        let share = if ua && ug { 0.5 } else { 1.0 };
        if ua {
            v[kk] = share * phi[kk];
        }
        if ug {
            v[k + kk] = share * phi[kk];
        }
    }
    if engine.concentrate(&v[..k], &v[k..], false).is_err() {
        // Matching alone left the regressors degenerate; nudge every free
        // coefficient off zero.
        for (j, &i) in outer.iter().enumerate() {
            v[i] += 0.1 * if j % 2 == 0 { 1.0 } else { -1.0 };
        }
    }
    Ok(outer.iter().map(|&i| v[i]).collect())
}

/// Maximizes the matching likelihood over the interaction coefficients.
/// Returns `(Phi, optimizer result)`; non-interaction coefficients stay 0.
fn matching_only_phi(
    engine: &mut LikelihoodEngine<'_>,
    spec: &BasisSpec,
    opts: &EstimatorOptions,
) -> Result<(Vec<f64>, crate::optim::BfgsResult, Vec<usize>)> {
    let k = spec.len();
    let inter: Vec<usize> = (0..k).filter(|&kk| spec.terms()[kk].is_interaction()).collect();
    let n = engine.sample().len() as f64;
    let to_theta = |x: &[f64]| {
        let mut th = Theta::zeros(k, 0.0, 0.0, 0.0, 1.0);
        for (&kk, &xi) in inter.iter().zip(x) {
            if spec.alpha_mask()[kk] {
                th.amenity[kk] = xi;
            } else {
                th.productivity[kk] = xi;
            }
        }
        th
    };
    let l1_grad = |g: &[f64], kk: usize| {
        if spec.alpha_mask()[kk] {
            g[Param::Amenity(kk).index(k)]
        } else {
            g[Param::Productivity(kk).index(k)]
        }
    };
    let x0 = vec![0.0; inter.len()];
    let res = if inter.is_empty() {
        crate::optim::BfgsResult {
            x: Vec::new(),
            f: 0.0,
            g: Vec::new(),
            iterations: 0,
            status: Status::Converged,
            measure: 0.0,
            trace: Vec::new(),
        }
    } else {
        minimize(
            &x0,
            |x| {
                let th = to_theta(x);
                let ev = engine.evaluate(&th)?;
                let l1 = ev.breakdown.log_l1;
                let g = engine.gradient(&ev)?;
                Ok((-l1 / n, inter.iter().map(|&kk| -l1_grad(&g, kk) / n).collect()))
            },
            |_, g| g.iter().fold(0.0, |m, v| f64::max(m, v.abs())),
            &opts.optimizer,
        )?
    };
    let mut phi = vec![0.0; k];
    for (&kk, &xi) in inter.iter().zip(&res.x) {
        phi[kk] = xi;
    }
    Ok((phi, res, inter))
}

/// Estimates `Phi` from matches alone. Only interaction bases are identified;
/// the split into `A` and `Gamma` and the transfer parameters are not.
pub fn estimate_matching_only(
    sample: &MatchSample,
    spec: &BasisSpec,
    opts: &EstimatorOptions,
) -> Result<EstimationReport> {
    check_identifiable(spec, sample)?;
    let k = spec.len();
    let n = sample.len();
    let transfers_masked = sample.with_transfers(vec![None; n])?;
    let mut engine = LikelihoodEngine::new(spec, &transfers_masked, tight(opts))?;
    let (phi, res, inter) = matching_only_phi(&mut engine, spec, opts)?;

    // Phi is reported on A where the basis enters alpha, else on Gamma.
    let mut theta = Theta::zeros(k, 0.0, 0.0, 0.0, 1.0);
    for kk in 0..k {
        if spec.alpha_mask()[kk] {
            theta.amenity[kk] = phi[kk];
        } else {
            theta.productivity[kk] = phi[kk];
        }
    }
    let ev = engine.evaluate(&theta)?;

    let mut phi_std_errors = vec![None; k];
    let mut hessian_status = HessianStatus::NotComputed;
    let mut covariance = None;
    if opts.standard_errors && !inter.is_empty() {
        let x0: Vec<f64> = inter.iter().map(|&kk| phi[kk]).collect();
        let h = fd_hessian(&x0, opts.hessian_step, |x| {
            let mut th = Theta::zeros(k, 0.0, 0.0, 0.0, 1.0);
            for (&kk, &xi) in inter.iter().zip(x) {
                if spec.alpha_mask()[kk] {
                    th.amenity[kk] = xi;
                } else {
                    th.productivity[kk] = xi;
                }
            }
            let (_, g) = engine.value_and_gradient(&th)?;
            Ok(inter
                .iter()
                .map(|&kk| {
                    if spec.alpha_mask()[kk] {
                        g[Param::Amenity(kk).index(k)]
                    } else {
                        g[Param::Productivity(kk).index(k)]
                    }
                })
                .collect())
        });
        match covariance_from_hessian(&h?) {
            Some(cov) => {
                hessian_status = HessianStatus::PositiveDefinite;
                for (a, &kk) in inter.iter().enumerate() {
                    phi_std_errors[kk] = Some(libm::sqrt(cov[(a, a)]));
                }
                let mut full = vec![vec![0.0; k]; k];
                for (a, &i) in inter.iter().enumerate() {
                    for (b, &j) in inter.iter().enumerate() {
                        full[i][j] = cov[(a, b)];
                    }
                }
                covariance = Some(full);
            }
            None => hessian_status = HessianStatus::NotPositiveDefinite,
        }
    }
    let identified = vec![false; 2 * k + 4];
    let status = if res.status == Status::Converged { EstimationStatus::Converged } else { EstimationStatus::NotConverged };
    let loglik = LikelihoodBreakdown {
        log_l1: ev.breakdown.log_l1,
        log_l2: 0.0,
        binomial: 0.0,
        total: ev.breakdown.log_l1,
        n_observed_transfers: 0,
    };
    Ok(EstimationReport {
        method: Method::MatchingOnly,
        parameter_names: spec.parameter_names(),
        theta_hat: theta,
        identified,
        std_errors: vec![None; 2 * k + 4],
        phi_hat: phi,
        phi_std_errors,
        split_identified: false,
        loglik,
        r_squared: None,
        convergence: Convergence {
            status,
            optimizer_status: res.status,
            iterations: res.iterations,
            gradient_norm: res.measure,
            objective_trace: res.trace.iter().map(|f| -f * n as f64).collect(),
            pinned: Vec::new(),
        },
        hessian_status,
        covariance,
        n,
        config_echo: *opts,
    })
}

/// Likelihood-ratio statistic `2 (log L_unrestricted - log L_restricted)`.
pub fn lr_statistic(restricted: &EstimationReport, unrestricted: &EstimationReport) -> f64 {
    2.0 * (unrestricted.loglik.total - restricted.loglik.total)
}

/// Number of estimated coefficients, for likelihood-ratio degrees of freedom.
pub fn free_parameter_count(report: &EstimationReport) -> usize {
    match report.method {
        Method::MatchingOnly => report.phi_hat.len(),
        _ => report.identified.iter().filter(|b| **b).count() - report.convergence.pinned.len(),
    }
}
