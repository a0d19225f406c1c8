//! The engine against a direct evaluator: plain Sinkhorn on the full `n x n`
//! matrix, no class compression, bases written out by hand.

use matchwage_core::equilibrium::SolverConfig;
use matchwage_core::likelihood::{log_likelihood, LikelihoodEngine};
use matchwage_core::model::{BasisSpec, Covariates, MatchSample, Theta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Direct {
    l1: f64,
    l2: f64,
    a: Vec<f64>,
    b: Vec<f64>,
}

// Bases: x1*y1 (both sides), y1 (alpha only), x1 (gamma only), x2*y2 (both).
fn bases(x: &[f64], y: &[f64]) -> [f64; 4] {
    [x[0] * y[0], y[0], x[0], x[1] * y[1]]
}

fn spec() -> BasisSpec {
    BasisSpec::products(&[(1, 1, true, true), (0, 1, true, false), (1, 0, false, true), (2, 2, true, true)]).unwrap()
}

fn direct(theta: &Theta, s: &MatchSample) -> Direct {
    let n = s.len();
    let w = s.weights();
    let alpha = |i: usize, j: usize| {
        let v = bases(s.workers().row(i), s.firms().row(j));
        theta.amenity[0] * v[0] + theta.amenity[1] * v[1] + theta.amenity[3] * v[3]
    };
    let gamma = |i: usize, j: usize| {
        let v = bases(s.workers().row(i), s.firms().row(j));
        theta.productivity[0] * v[0] + theta.productivity[2] * v[2] + theta.productivity[3] * v[3]
    };
    let kern: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (alpha(i, j) + gamma(i, j)).exp()).collect()).collect();
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; n];
    for _ in 0..100_000 {
        for i in 0..n {
            u[i] = w[i] / (0..n).map(|j| kern[i][j] * v[j]).sum::<f64>();
        }
        for j in 0..n {
            v[j] = w[j] / (0..n).map(|i| kern[i][j] * u[i]).sum::<f64>();
        }
        let err = (0..n)
            .map(|i| ((0..n).map(|j| kern[i][j] * u[i] * v[j]).sum::<f64>() - w[i]).abs())
            .fold(0.0, f64::max);
        if err < 1e-15 {
            break;
        }
    }
    let shift = -u[0].ln();
    let a: Vec<f64> = u.iter().map(|x| -x.ln() - shift).collect();
    let b: Vec<f64> = v.iter().map(|x| -x.ln() + shift).collect();
    let l1: f64 = (0..n).map(|i| n as f64 * w[i] * (alpha(i, i) + gamma(i, i) - a[i] - b[i])).sum();
    let mut ss = 0.0;
    let mut n_obs = 0.0;
    for i in 0..n {
        if let Some(t) = s.transfers()[i] {
            let wage = theta.sigma1 * (gamma(i, i) - b[i]) + theta.sigma2 * (a[i] - alpha(i, i)) + theta.t;
            ss += n as f64 * w[i] * (t - wage).powi(2);
            n_obs += n as f64 * w[i];
        }
    }
    let l2 = if n_obs > 0.0 { -ss / (2.0 * theta.s2) - 0.5 * n_obs * theta.s2.ln() } else { 0.0 };
    Direct { l1, l2, a, b }
}

fn random_sample(rng: &mut ChaCha8Rng, n: usize, weighted: bool, duplicates: bool) -> MatchSample {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..n {
        // Every third row repeats an earlier one so classes have several members.
        if duplicates && i >= 3 && i % 3 == 0 {
            let k = rng.random_range(0..i);
            xs.extend_from_slice(&[xs[2 * k], xs[2 * k + 1]]);
            ys.extend_from_slice(&[ys[2 * k], ys[2 * k + 1]]);
        } else {
            xs.extend_from_slice(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            ys.extend_from_slice(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
        }
    }
    let transfers = (0..n).map(|_| if rng.random_bool(0.8) { Some(rng.random_range(0.0..2.0)) } else { None }).collect();
    let x = Covariates::new(n, 2, xs).unwrap();
    let y = Covariates::new(n, 2, ys).unwrap();
    if weighted {
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let tot: f64 = raw.iter().sum();
        MatchSample::with_weights(x, y, transfers, raw.iter().map(|r| r / tot).collect()).unwrap()
    } else {
        MatchSample::new(x, y, transfers).unwrap()
    }
}

fn random_theta(rng: &mut ChaCha8Rng) -> Theta {
    let mut th = Theta::zeros(4, rng.random_range(0.1..1.0), rng.random_range(0.1..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0));
    for k in [0, 1, 3] {
        th.amenity[k] = rng.random_range(-1.0..1.0);
    }
    for k in [0, 2, 3] {
        th.productivity[k] = rng.random_range(-1.0..1.0);
    }
    th
}

#[test]
fn fifty_matches_agree_with_direct_evaluation() {
    let cfg = SolverConfig { tol: 1e-14, max_iter: 100_000 };
    let spec = spec();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..12 {
        let s = random_sample(&mut rng, 50, case % 2 == 1, case % 3 == 0);
        let th = random_theta(&mut rng);
        let d = direct(&th, &s);
        let ll = log_likelihood(&th, &spec, &s, &cfg).unwrap();
        assert!((ll.log_l1 - d.l1).abs() <= 1e-9 * d.l1.abs().max(1.0), "case {case}: {} vs {}", ll.log_l1, d.l1);
        assert!((ll.log_l2 - d.l2).abs() <= 1e-9 * d.l2.abs().max(1.0), "case {case}: {} vs {}", ll.log_l2, d.l2);

        let mut engine = LikelihoodEngine::new(&spec, &s, cfg).unwrap();
        let ev = engine.evaluate(&th).unwrap();
        for i in 0..50 {
            assert!((ev.potentials.a[i] - d.a[i]).abs() < 1e-9);
            assert!((ev.potentials.b[i] - d.b[i]).abs() < 1e-9);
        }
    }
}
