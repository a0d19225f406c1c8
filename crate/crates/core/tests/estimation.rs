use matchwage_core::equilibrium::SolverConfig;
use matchwage_core::estimator::{
    estimate, estimate_concentrated, estimate_matching_only, lr_statistic, rounding_floor, EstimatorOptions, Method,
    SigmaParam,
};
use matchwage_core::model::{BasisSpec, MatchSample, Theta};
use matchwage_core::sim::{build_market, draw_sample, mask_transfers, GroundTruthMarket, Grid};

fn spec() -> BasisSpec {
    BasisSpec::products(&[(1, 1, true, true), (0, 1, true, false), (1, 0, false, true)]).unwrap()
}

fn market() -> GroundTruthMarket {
    let th = Theta::new(vec![0.5, -0.5, 0.0], vec![1.0, 0.0, 0.8], 0.3, 0.2, 1.0, 0.04).unwrap();
    let g = Grid::linspace(8, -1.0, 1.0).unwrap();
    build_market(g.clone(), g, th, spec(), &SolverConfig::default()).unwrap()
}

fn data(seed: u64, n: usize) -> MatchSample {
    draw_sample(&market(), n, 0.0, seed).unwrap()
}

#[test]
fn recovers_phi_within_four_standard_errors() {
    let s = data(21, 1500);
    let r = estimate(&s, &spec(), &EstimatorOptions::default()).unwrap();
    assert!(r.converged(), "{:?}", r.convergence);
    assert_eq!(r.method, Method::Full);
    let truth = [1.5, -0.5, 0.8];
    for k in 0..3 {
        let se = r.phi_std_errors[k].expect("standard error");
        assert!((r.phi_hat[k] - truth[k]).abs() < 4.0 * se, "Phi[{k}] = {} +- {se}", r.phi_hat[k]);
    }
    assert!((r.theta_hat.sigma1 - 0.3).abs() < 0.1 && (r.theta_hat.sigma2 - 0.2).abs() < 0.1);
    assert!((r.theta_hat.s2 - 0.04).abs() < 0.01);
    assert!(r.convergence.gradient_norm <= EstimatorOptions::default().optimizer.grad_tol);
}

#[test]
fn objective_trace_never_drops() {
    let s = data(22, 800);
    let r = estimate(&s, &spec(), &EstimatorOptions { standard_errors: false, ..Default::default() }).unwrap();
    let n = s.len() as f64;
    for w in r.convergence.objective_trace.windows(2) {
        // Values are total log-likelihoods; the floor is stated per observation.
        assert!(w[1] >= w[0] - n * rounding_floor(w[0] / n), "{} then {}", w[0], w[1]);
    }
}

#[test]
fn sigma_parameterization_does_not_move_the_optimum() {
    let s = data(23, 800);
    let base = EstimatorOptions { standard_errors: false, ..Default::default() };
    let e = estimate(&s, &spec(), &base).unwrap();
    let p = estimate(&s, &spec(), &EstimatorOptions { sigma_param: SigmaParam::Softplus, ..base }).unwrap();
    assert!(e.converged() && p.converged());
    assert!((e.loglik.total - p.loglik.total).abs() <= 1e-6, "{} vs {}", e.loglik.total, p.loglik.total);
}

#[test]
fn reruns_are_bitwise_identical() {
    let s = data(24, 600);
    let a = estimate(&s, &spec(), &EstimatorOptions::default()).unwrap();
    let b = estimate(&s, &spec(), &EstimatorOptions::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn concentrated_and_full_agree() {
    let s = data(25, 1000);
    let opts = EstimatorOptions { standard_errors: false, ..Default::default() };
    let f = estimate(&s, &spec(), &opts).unwrap();
    let c = estimate_concentrated(&s, &spec(), &opts).unwrap();
    assert!(f.converged() && c.converged());
    assert!((f.loglik.total - c.loglik.total).abs() <= 1e-6);
    for k in 0..3 {
        assert!((f.phi_hat[k] - c.phi_hat[k]).abs() <= 1e-4);
    }
}

#[test]
fn masking_limits() {
    let s = data(26, 700);
    let opts = EstimatorOptions::default();
    let full = estimate(&s, &spec(), &opts).unwrap();
    let kept = estimate(&mask_transfers(&s, 0.0, 1).unwrap(), &spec(), &opts).unwrap();
    assert_eq!(full, kept);

    let none = mask_transfers(&s, 1.0, 1).unwrap();
    let m = estimate(&none, &spec(), &opts).unwrap();
    let direct = estimate_matching_only(&none, &spec(), &opts).unwrap();
    assert_eq!(m.method, Method::MatchingOnly);
    assert_eq!(m.phi_hat, direct.phi_hat);
    assert!(!m.split_identified);
    assert!(m.identified.iter().all(|i| !i));
    // The x-only productivity term is not identified from matches alone.
    assert!(m.phi_std_errors[2].is_none());
}

#[test]
fn lr_statistic_is_nonnegative_for_nested_fits() {
    let s = data(27, 800);
    let opts = EstimatorOptions { standard_errors: false, ..Default::default() };
    let full = estimate(&s, &spec(), &opts).unwrap();
    let small = BasisSpec::products(&[(1, 1, true, true), (1, 0, false, true)]).unwrap();
    let restricted = estimate(&s, &small, &opts).unwrap();
    let lr = lr_statistic(&restricted, &full);
    assert!(lr > 0.0, "{lr}");
}

#[test]
fn constant_basis_is_rejected() {
    let s = data(28, 100);
    let spec = BasisSpec::products(&[(0, 0, true, true), (1, 1, true, true)]);
    match spec {
        Err(_) => {}
        Ok(spec) => assert!(estimate(&s, &spec, &EstimatorOptions::default()).is_err()),
    }
}
