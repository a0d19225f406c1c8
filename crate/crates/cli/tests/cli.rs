use std::path::{Path, PathBuf};

use matchwage::error::CliError;
use matchwage::io::{load_sample, save_sample, DatasetSchema, TransferTransform};
use matchwage::run_cli;
use matchwage_core::model::Covariates;
use matchwage_core::MatchSample;

fn config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/risk.toml").display().to_string()
}

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["matchwage".to_string(), "--config".into(), config(), "-q".into()];
    argv.extend(args.iter().map(|s| s.to_string()));
    run_cli(argv)
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn schema(transform: TransferTransform, weights: bool) -> DatasetSchema {
    DatasetSchema::new(
        vec!["x1".into(), "x2".into()],
        vec!["y1".into()],
        "w".into(),
        transform,
        weights.then(|| "wt".into()),
        "NA".into(),
    )
    .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn reads_a_small_file() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "d.csv", "x2,y1,x1,w,extra\n1,2,3,4.5,z\n0.5, -1 ,2,NA,z\n7,8,9,1e-3,z\n");
    let (s, info) = load_sample(&f, &schema(TransferTransform::Identity, false)).unwrap();
    assert_eq!(s.len(), 3);
    assert_eq!(info.missing_transfers, 1);
    assert_eq!(s.workers().row(1), &[2.0, 0.5]);
    assert_eq!(s.firms().row(1), &[-1.0]);
    assert_eq!(s.transfers(), &[Some(4.5), None, Some(1e-3)]);
}

#[test]
fn bad_rows_report_their_line() {
    let dir = tempfile::tempdir().unwrap();
    let line_of = |text: &str, t: TransferTransform| match load_sample(&write(dir.path(), "b.csv", text), &schema(t, false)) {
        Err(CliError::Data { line, .. }) => line,
        other => panic!("{other:?}"),
    };
    assert_eq!(line_of("x1,x2,y1,w\n1,2,3,4\n1,abc,3,4\n", TransferTransform::Identity), 3);
    assert_eq!(line_of("x1,x2,y1,w\n1,2,3,4\n1,2,3\n", TransferTransform::Identity), 3);
    assert_eq!(line_of("x1,x2,y1,w\n1,2,3,4\n1,2,3,4\n1,2,3,0\n", TransferTransform::Log), 4);
    assert_eq!(line_of("x1,y1,w\n1,2,3\n", TransferTransform::Identity), 1);
}

#[test]
fn save_then_load_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let x = Covariates::new(4, 2, vec![0.1, -2.0, 1.0 / 3.0, 4.0, 5e-7, 6.0, -7.25, 8.0]).unwrap();
    let y = Covariates::new(4, 1, vec![0.3, 0.7, 1e5, -0.9]).unwrap();
    let t = vec![Some(0.123456789), None, Some(-2.5), Some(10.0)];
    let raw = [1.0, 2.0, 3.0, 4.0];
    let s = MatchSample::with_weights(x, y, t, raw.iter().map(|w| w / 10.0).collect()).unwrap();
    for (tr, weights) in [(TransferTransform::Identity, true), (TransferTransform::Log, false), (TransferTransform::Log, true)] {
        let sch = schema(tr, weights);
        let f = dir.path().join("rt.csv");
        save_sample(&f, &s, &sch).unwrap();
        let (back, _) = load_sample(&f, &sch).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(1.0);
        assert_eq!(back.workers(), s.workers());
        assert_eq!(back.firms(), s.firms());
        for (a, b) in back.transfers().iter().zip(s.transfers()) {
            assert_eq!(a.is_some(), b.is_some());
            if let (Some(a), Some(b)) = (a, b) {
                assert!(close(*a, *b), "{a} vs {b}");
            }
        }
        if weights {
            assert!(back.weights().iter().zip(s.weights()).all(|(a, b)| close(*a, *b)));
        }
    }
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = p(d, "data.csv");
    assert_eq!(run(&["simulate", "--seed", "5", "--set", "simulate.n=800", "--out", &data]), 0);
    assert_eq!(run(&["estimate", "--data", &data, "--out", &p(d, "est.json"), "--table", &p(d, "est.txt")]), 0);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("est.json")).unwrap()).unwrap();
    assert_eq!(report["result"]["convergence"]["status"], "converged");
    assert_eq!(report["version"], matchwage_core::VERSION);
    assert_eq!(report["config"]["data"]["transform"], "log");
    assert!(std::fs::read_to_string(d.join("est.txt")).unwrap().contains("sigma1"));

    assert_eq!(run(&["estimate", "--concentrated", "--data", &data, "--out", &p(d, "conc.json")]), 0);
    assert_eq!(run(&["vsl", "--theta", &p(d, "est.json"), "--out", &p(d, "vsl.json")]), 0);
    assert_eq!(run(&["hedonic", "--data", &data, "--out", &p(d, "hed.json")]), 0);
    assert_eq!(run(&["counterfactual", "--data", &data, "--theta", &p(d, "est.json"), "--out", &p(d, "cf.json")]), 0);
    let cf: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("cf.json")).unwrap()).unwrap();
    assert!(cf["result"]["after"]["marginal_residual"].as_f64().unwrap() <= 1e-10);
    assert!(cf["result"]["share_changed_definition"].as_str().unwrap().starts_with("L1 reassignment"));

    let small = "[[basis.terms]]\nworker = \"skill\"\nfirm = \"risk\"\nalpha = true\ngamma = true\n[[basis.terms]]\nworker = \"skill\"\nalpha = false\ngamma = true\n";
    let text = std::fs::read_to_string(config()).unwrap();
    let start = text.find("[[basis.terms]]").unwrap();
    let end = text.find("[simulate]").unwrap();
    let restricted_cfg = write(d, "restricted.toml", &format!("{}{}{}", &text[..start], small, &text[end..]));
    let code = run_cli([
        "matchwage", "--config", restricted_cfg.to_str().unwrap(), "-q", "estimate", "--data", &data, "--out", &p(d, "r.json"),
    ]);
    assert_eq!(code, 0);
    assert_eq!(run(&["lrtest", "--restricted", &p(d, "r.json"), "--unrestricted", &p(d, "est.json"), "--out", &p(d, "lr.json")]), 0);
    let lr: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("lr.json")).unwrap()).unwrap();
    assert_eq!(lr["result"]["df"], 1);
    let pv = lr["result"]["p_value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&pv));
}

#[test]
fn gradcheck_on_twenty_matches() {
    let dir = tempfile::tempdir().unwrap();
    let data = p(dir.path(), "d.csv");
    assert_eq!(run(&["simulate", "--seed", "2", "--set", "simulate.n=20", "--out", &data]), 0);
    let out = p(dir.path(), "g.json");
    assert_eq!(run(&["gradcheck", "--seed", "9", "--data", &data, "--out", &out]), 0);
    let g: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!(g["result"]["max_rel_error"].as_f64().unwrap() <= 1e-5);
    assert_eq!(g["result"]["pass"], true);
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["estimate", "--no-such-flag"]), 2);
    assert_eq!(run(&["frobnicate"]), 2);
    assert_eq!(run(&["estimate", "--set", "solver.tolerance=1"]), 2);
    assert_eq!(run_cli(["matchwage", "-q", "simulate", "--out", &p(dir.path(), "x.csv")]), 2);
    // A data file that does not exist is a runtime error, not a usage error.
    assert_eq!(run(&["estimate", "--data", &p(dir.path(), "missing.csv")]), 1);
}

#[test]
fn non_convergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = p(dir.path(), "d.csv");
    assert_eq!(run(&["simulate", "--seed", "1", "--set", "simulate.n=300", "--out", &data]), 0);
    let out = p(dir.path(), "e.json");
    assert_eq!(run(&["estimate", "--data", &data, "--set", "optimizer.max_iter=2", "--out", &out]), 3);
    // The report is still written, with its status.
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(r["result"]["convergence"]["status"], "not_converged");
}
