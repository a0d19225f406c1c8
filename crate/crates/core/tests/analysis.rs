use matchwage_core::analysis::{
    counterfactual, hedonic_baseline, FirmTransform, HedonicSpec, TransferScale, VslUnits,
};
use matchwage_core::equilibrium::SolverConfig;
use matchwage_core::model::{BasisSpec, Covariates, MatchSample, Theta};
use matchwage_core::sim::{build_market, draw_sample, Grid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

fn spec() -> BasisSpec {
    BasisSpec::products(&[(1, 1, true, true), (0, 1, true, false), (1, 0, false, true)]).unwrap()
}

fn risk_grid(m: usize) -> Grid {
    // Fewer jobs at higher risk.
    let pts = Covariates::new(m, 1, (0..m).map(|j| j as f64 / (m - 1) as f64).collect()).unwrap();
    let raw: Vec<f64> = (0..m).map(|j| (-1.5 * j as f64 / m as f64).exp()).collect();
    let tot: f64 = raw.iter().sum();
    Grid::new(pts, raw.iter().map(|r| r / tot).collect()).unwrap()
}

#[test]
fn amenity_slope_decomposes_into_sorting_and_wage_slopes() {
    let th = Theta::new(vec![0.6, -1.2, 0.0], vec![0.8, 0.0, 0.5], 0.35, 0.25, 2.0, 0.01).unwrap();
    let m = build_market(
        Grid::linspace(7, -1.0, 1.0).unwrap(),
        risk_grid(9),
        th.clone(),
        spec(),
        &SolverConfig { tol: 1e-14, max_iter: 100_000 },
    )
    .unwrap();
    let cond = m.job_conditional();
    let sigma = th.sigma();
    for i in 0..7 {
        for j in 0..8 {
            let dalpha = sigma * (m.alpha[(i, j + 1)] - m.alpha[(i, j)]);
            let dlogpi = cond[(i, j + 1)].ln() - cond[(i, j)].ln();
            let dw = m.w_star[(i, j + 1)] - m.w_star[(i, j)];
            assert!((dalpha - (th.sigma1 * dlogpi - dw)).abs() < 1e-9, "x {i}, y {j}");
        }
    }
}

#[test]
fn noise_wages_give_a_null_risk_coefficient() {
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let u = Uniform::new(0.0, 1.0).unwrap();
    let x = Covariates::new(n, 1, (0..n).map(|_| u.sample(&mut rng)).collect()).unwrap();
    let y = Covariates::new(n, 1, (0..n).map(|_| u.sample(&mut rng)).collect()).unwrap();
    let w = (0..n).map(|_| Some(StandardNormal.sample(&mut rng))).collect();
    let s = MatchSample::new(x, y, w).unwrap();
    let r = hedonic_baseline(
        &s,
        &HedonicSpec { worker_columns: vec![0], firm_columns: vec![0], risk_column: 0 },
        &VslUnits { mean_earnings: 1.0, risk_unit_scale: 1.0 },
    )
    .unwrap();
    let se = r.risk_std_error.unwrap();
    assert!(r.risk_coefficient.abs() < 4.0 * se, "{} +- {se}", r.risk_coefficient);
    assert_eq!(r.rows, n);
}

#[test]
fn rank_deficient_hedonic_design_errors() {
    let x = Covariates::new(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = Covariates::new(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let s = MatchSample::new(x, y, vec![Some(1.0), Some(2.0), Some(0.0), Some(1.0)]).unwrap();
    let spec = HedonicSpec { worker_columns: vec![0], firm_columns: vec![0], risk_column: 0 };
    assert!(hedonic_baseline(&s, &spec, &VslUnits { mean_earnings: 1.0, risk_unit_scale: 1.0 }).is_err());
}

#[test]
fn counterfactuals_on_simulated_data() {
    let th = Theta::new(vec![0.6, -1.2, 0.0], vec![0.8, 0.0, 0.5], 0.35, 0.25, 2.0, 0.01).unwrap();
    let m = build_market(Grid::linspace(5, -1.0, 1.0).unwrap(), risk_grid(6), th.clone(), spec(), &SolverConfig::default())
        .unwrap();
    let s = draw_sample(&m, 300, 0.0, 4).unwrap();
    let cfg = SolverConfig::default();
    let base = counterfactual(&th, &spec(), &s, &FirmTransform::Identity, TransferScale::Log, &cfg).unwrap();
    let above = counterfactual(&th, &spec(), &s, &FirmTransform::Cap { column: 0, max: 5.0 }, TransferScale::Log, &cfg).unwrap();
    assert_eq!(base, above);
    assert_eq!(base.share_changed, 0.0);
    assert!((0.0..=1.0).contains(&base.gini_before));

    let cap = counterfactual(&th, &spec(), &s, &FirmTransform::Cap { column: 0, max: 0.5 }, TransferScale::Log, &cfg).unwrap();
    assert!(cap.after.marginal_residual <= cfg.tol);
    assert!(cap.share_changed > 0.0);
    assert!((0.0..=1.0).contains(&cap.gini_after));
    // Risk lowers amenities, so capping it raises them and wages fall.
    assert!(cap.mean_wage_change < 0.0, "{}", cap.mean_wage_change);
    for (c, &mass) in cap.after.worker_mass.iter().enumerate() {
        assert!((cap.after.pi.row(c).sum() - mass).abs() <= cfg.tol);
    }
    for (d, &mass) in cap.after.firm_mass.iter().enumerate() {
        assert!((cap.after.pi.column(d).sum() - mass).abs() <= cfg.tol);
    }
}
