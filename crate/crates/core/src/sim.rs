//! Synthetic markets on finite type grids and seeded sampling of matches.
//!
//! On a grid with masses `f` and `g` the potentials solve the same system as
//! in a sample, with the masses as marginals. Sampling draws cells from
//! `pi*`, which realizes the logit choice probabilities of both sides.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::distr::{Bernoulli, Distribution};
use rand::distr::weighted::WeightedIndex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::equilibrium::{solve_potentials_with, Potentials, SolverConfig};
use crate::error::{invalid, Error, Result};
use crate::model::{BasisSpec, Covariates, MatchSample, Theta};

/// Type grid of one side of the market.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Grid {
    pub points: Covariates,
    pub masses: Vec<f64>,
}

impl Grid {
    pub fn new(points: Covariates, masses: Vec<f64>) -> Result<Self> {
        let m = points.rows();
        if m == 0 || masses.len() != m {
            return Err(invalid!("grid has {m} points and {} masses", masses.len()));
        }
        if masses.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(invalid!("grid masses must be positive"));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid!("grid masses sum to {total}"));
        }
        for i in 0..m {
            for j in 0..i {
                if points.row(i) == points.row(j) {
                    return Err(invalid!("grid points {j} and {i} coincide"));
                }
            }
        }
        Ok(Self { points, masses })
    }

    pub fn uniform(points: Covariates) -> Result<Self> {
        let m = points.rows();
        Self::new(points, vec![1.0 / m as f64; m])
    }

    /// `m` equally spaced one-dimensional points on `[lo, hi]` with equal masses.
    pub fn linspace(m: usize, lo: f64, hi: f64) -> Result<Self> {
        if m < 2 {
            return Err(invalid!("linspace needs at least two points"));
        }
        let pts = (0..m).map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64).collect();
        Self::uniform(Covariates::new(m, 1, pts)?)
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct GroundTruthMarket {
    pub workers: Grid,
    pub firms: Grid,
    pub spec: BasisSpec,
    pub theta_star: Theta,
    pub potentials: Potentials,
    pub alpha: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub pi_star: DMatrix<f64>,
    pub w_star: DMatrix<f64>,
}

impl GroundTruthMarket {
    /// Worker systematic utility `sigma alpha + w` in wage units.
    pub fn worker_utility(&self) -> DMatrix<f64> {
        &self.alpha * self.theta_star.sigma() + &self.w_star
    }

    /// Firm systematic profit `sigma gamma - w` in wage units.
    pub fn firm_profit(&self) -> DMatrix<f64> {
        &self.gamma * self.theta_star.sigma() - &self.w_star
    }

    /// Expected indirect utility `u = sigma a + sigma1 log f + t`.
    pub fn worker_welfare(&self) -> Vec<f64> {
        let th = &self.theta_star;
        self.potentials
            .a
            .iter()
            .zip(&self.workers.masses)
            .map(|(a, f)| th.sigma() * a + th.sigma1 * libm::log(*f) + th.t)
            .collect()
    }

    /// Expected indirect profit `v = sigma b + sigma2 log g - t`.
    pub fn firm_welfare(&self) -> Vec<f64> {
        let th = &self.theta_star;
        self.potentials
            .b
            .iter()
            .zip(&self.firms.masses)
            .map(|(b, g)| th.sigma() * b + th.sigma2 * libm::log(*g) - th.t)
            .collect()
    }

    /// `pi(y_j | x_i)`.
    pub fn job_conditional(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.pi_star.nrows(), self.pi_star.ncols(), |i, j| self.pi_star[(i, j)] / self.workers.masses[i])
    }
}

/// Solves the grid equilibrium at `theta_star`.
pub fn build_market(
    workers: Grid,
    firms: Grid,
    theta_star: Theta,
    spec: BasisSpec,
    config: &SolverConfig,
) -> Result<GroundTruthMarket> {
    theta_star.validate()?;
    theta_star.check_spec(&spec)?;
    spec.check_dims(workers.points.cols(), firms.points.cols())?;
    let (m1, m2) = (workers.len(), firms.len());
    let (am, gm, pm) = theta_star.effective(&spec);
    let mut alpha = DMatrix::zeros(m1, m2);
    let mut gamma = DMatrix::zeros(m1, m2);
    let mut phi = DMatrix::zeros(m1, m2);
    let mut buf = vec![0.0; spec.len()];
    for i in 0..m1 {
        for j in 0..m2 {
            spec.eval_into(workers.points.row(i), firms.points.row(j), &mut buf);
            let dot = |c: &[f64]| c.iter().zip(&buf).map(|(a, b)| a * b).sum::<f64>();
            alpha[(i, j)] = dot(&am);
            gamma[(i, j)] = dot(&gm);
            phi[(i, j)] = dot(&pm);
            if !phi[(i, j)].is_finite() {
                let k = buf.iter().zip(&pm).position(|(b, c)| !(b * c).is_finite()).unwrap_or(0);
                return Err(Error::NonFinitePhi { i, j, k });
            }
        }
    }
    let potentials = solve_potentials_with(&phi, &workers.masses, &firms.masses, config, None)?;
    let pi_star = DMatrix::from_fn(m1, m2, |i, j| libm::exp(phi[(i, j)] - potentials.a[i] - potentials.b[j]));
    let th = &theta_star;
    let w_star = DMatrix::from_fn(m1, m2, |i, j| {
        th.sigma1 * (gamma[(i, j)] - potentials.b[j]) + th.sigma2 * (potentials.a[i] - alpha[(i, j)]) + th.t
    });
    Ok(GroundTruthMarket { workers, firms, spec, theta_star, potentials, alpha, gamma, phi, pi_star, w_star })
}

/// Draws `n` matches i.i.d. from `pi*` with transfers `w* + N(0, s2*)`.
/// Each transfer is then dropped with probability `missing_prob`.
pub fn draw_sample(market: &GroundTruthMarket, n: usize, missing_prob: f64, seed: u64) -> Result<MatchSample> {
    draw_sample_with_noise(market, n, missing_prob, market.theta_star.s2, seed)
}

/// As [`draw_sample`] with an explicit noise variance (which may be zero).
pub fn draw_sample_with_noise(
    market: &GroundTruthMarket,
    n: usize,
    missing_prob: f64,
    noise_variance: f64,
    seed: u64,
) -> Result<MatchSample> {
    if n == 0 {
        return Err(invalid!("sample size must be positive"));
    }
    if !(noise_variance >= 0.0) || !noise_variance.is_finite() {
        return Err(invalid!("noise variance must be nonnegative"));
    }
    let (m1, m2) = market.pi_star.shape();
    let cells: Vec<f64> = (0..m1 * m2).map(|c| market.pi_star[(c / m2, c % m2)]).collect();
    let index = WeightedIndex::new(&cells).map_err(|e| invalid!("cannot sample from pi*: {e}"))?;
    let sd = libm::sqrt(noise_variance);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dx, dy) = (market.workers.points.cols(), market.firms.points.cols());
    let mut xs = Vec::with_capacity(n * dx);
    let mut ys = Vec::with_capacity(n * dy);
    let mut transfers = Vec::with_capacity(n);
    for _ in 0..n {
        let c = index.sample(&mut rng);
        let (i, j) = (c / m2, c % m2);
        let z: f64 = StandardNormal.sample(&mut rng);
        xs.extend_from_slice(market.workers.points.row(i));
        ys.extend_from_slice(market.firms.points.row(j));
        transfers.push(Some(market.w_star[(i, j)] + sd * z));
    }
    let sample = MatchSample::new(Covariates::new(n, dx, xs)?, Covariates::new(n, dy, ys)?, transfers)?;
    mask_transfers(&sample, missing_prob, seed)
}

/// Drops each transfer independently with probability `prob`. The mask uses
/// its own random stream, so it never disturbs the draws of the data.
pub fn mask_transfers(sample: &MatchSample, prob: f64, seed: u64) -> Result<MatchSample> {
    let coin = Bernoulli::new(prob).map_err(|_| invalid!("missing probability {prob} outside [0, 1]"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let transfers = sample
        .transfers()
        .iter()
        .map(|t| if coin.sample(&mut rng) { None } else { *t })
        .collect();
    sample.with_transfers(transfers)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec1() -> BasisSpec {
        BasisSpec::products(&[(1, 1, true, true)]).unwrap()
    }

    #[test]
    fn zero_phi_market_is_independent() {
        let w = Grid::new(Covariates::new(3, 1, vec![0.0, 1.0, 2.0]).unwrap(), vec![0.2, 0.3, 0.5]).unwrap();
        let f = Grid::new(Covariates::new(2, 1, vec![-1.0, 1.0]).unwrap(), vec![0.4, 0.6]).unwrap();
        let th = Theta::zeros(1, 0.5, 0.5, 0.0, 1.0);
        let m = build_market(w, f, th, spec1(), &SolverConfig::default()).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let expected = m.workers.masses[i] * m.firms.masses[j];
                assert!((m.pi_star[(i, j)] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_by_two_closed_form() {
        // With equal masses the solution is symmetric and
        // pi_11 = e^{D/2} / (2 (1 + e^{D/2})) for cross-difference D.
        let g = Grid::linspace(2, 0.0, 1.0).unwrap();
        let th = Theta::new(vec![1.0], vec![1.0], 0.5, 0.5, 0.0, 1.0).unwrap();
        let m = build_market(g.clone(), g, th, spec1(), &SolverConfig { tol: 1e-14, max_iter: 10_000 }).unwrap();
        let d = m.phi[(0, 0)] + m.phi[(1, 1)] - m.phi[(0, 1)] - m.phi[(1, 0)];
        let e = libm::exp(d / 2.0);
        let diag = e / (2.0 * (1.0 + e));
        assert!((m.pi_star[(0, 0)] - diag).abs() < 1e-12);
        assert!((m.pi_star[(1, 1)] - diag).abs() < 1e-12);
        assert!((m.pi_star[(0, 1)] - (0.5 - diag)).abs() < 1e-12);
        assert!(m.pi_star[(0, 0)] > m.pi_star[(0, 1)]);
    }

    #[test]
    fn logit_conditionals_reproduce_pi() {
        let w = Grid::new(Covariates::new(3, 1, vec![0.0, 1.0, 2.0]).unwrap(), vec![0.2, 0.3, 0.5]).unwrap();
        let f = Grid::new(Covariates::new(4, 1, vec![-1.0, 0.0, 0.5, 1.0]).unwrap(), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let spec = BasisSpec::products(&[(1, 1, true, true), (0, 1, true, false), (1, 0, false, true)]).unwrap();
        let th = Theta::new(vec![0.4, -0.7, 0.0], vec![0.6, 0.0, 0.3], 0.3, 0.2, 1.0, 0.1).unwrap();
        let m = build_market(w, f, th.clone(), spec, &SolverConfig { tol: 1e-14, max_iter: 10_000 }).unwrap();
        let u = m.worker_welfare();
        let v = m.firm_welfare();
        let uu = m.worker_utility();
        let vv = m.firm_profit();
        for i in 0..3 {
            for j in 0..4 {
                let py_x = libm::exp((uu[(i, j)] - u[i]) / th.sigma1);
                let px_y = libm::exp((vv[(i, j)] - v[j]) / th.sigma2);
                assert!((py_x - m.pi_star[(i, j)] / m.workers.masses[i]).abs() < 1e-12);
                assert!((px_y - m.pi_star[(i, j)] / m.firms.masses[j]).abs() < 1e-12);
            }
        }
    }

    fn market() -> GroundTruthMarket {
        let g = Grid::linspace(4, -1.0, 1.0).unwrap();
        let th = Theta::new(vec![0.5], vec![0.7], 0.3, 0.2, 1.0, 0.04).unwrap();
        build_market(g.clone(), g, th, spec1(), &SolverConfig::default()).unwrap()
    }

    #[test]
    fn sampling_is_seeded_and_respects_masks() {
        let m = market();
        let a = draw_sample(&m, 50, 0.3, 9).unwrap();
        let b = draw_sample(&m, 50, 0.3, 9).unwrap();
        assert_eq!(a, b);
        let full = draw_sample(&m, 50, 0.0, 9).unwrap();
        for (x, y) in a.transfers().iter().zip(full.transfers()) {
            if x.is_some() {
                assert_eq!(x, y);
            }
        }
        assert_eq!(full.observed_transfers(), 50);
        assert_eq!(draw_sample(&m, 50, 1.0, 9).unwrap().observed_transfers(), 0);
    }

    #[test]
    fn noiseless_transfers_equal_model_wages() {
        let m = market();
        let s = draw_sample_with_noise(&m, 40, 0.0, 0.0, 3).unwrap();
        for i in 0..40 {
            let xi = (0..4).position(|r| m.workers.points.get(r, 0) == s.workers().get(i, 0)).unwrap();
            let yj = (0..4).position(|r| m.firms.points.get(r, 0) == s.firms().get(i, 0)).unwrap();
            assert_eq!(s.transfers()[i], Some(m.w_star[(xi, yj)]));
        }
    }
}
