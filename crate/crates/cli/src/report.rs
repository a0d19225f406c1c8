//! JSON report envelope and plain-text tables.

use std::fmt::Write as _;
use std::path::Path;

use matchwage_core::analysis::HedonicResult;
use matchwage_core::estimator::{EstimationReport, Method};
use matchwage_core::BasisSpec;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: Config,
    pub result: T,
}

impl<T: Serialize> Envelope<T> {
    pub fn new(command: &str, seed: u64, config: &Config, result: T) -> Self {
        Self { command: command.into(), version: matchwage_core::VERSION.into(), seed, config: config.clone(), result }
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        write_text(path, &text)
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

pub fn read_estimate(path: &Path) -> Result<EstimationReport, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let env: Envelope<EstimationReport> = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{} is not an estimate report: {e}", path.display())))?;
    Ok(env.result)
}

fn num(v: f64) -> String {
    format!("{v:.4}")
}

fn se(v: Option<f64>) -> String {
    v.map_or_else(String::new, |s| format!("({s:.4})"))
}

const W: usize = 14;

fn row(out: &mut String, label: &str, cells: &[String]) {
    let _ = write!(out, "{label:<20}");
    for c in cells {
        let _ = write!(out, "{c:>W$}");
    }
    out.push('\n');
}

/// Coefficients with standard errors in parentheses underneath, one row per
/// basis term, then the scale parameters and fit statistics.
pub fn estimation_table(r: &EstimationReport, spec: &BasisSpec, labels: &[String]) -> String {
    let k = spec.len();
    let mut out = String::new();
    let title = match r.method {
        Method::Full => "Full maximum likelihood",
        Method::Concentrated => "Concentrated maximum likelihood",
        Method::MatchingOnly => "Matching-only maximum likelihood",
    };
    let _ = writeln!(out, "{title} (n = {}, transfers observed = {})", r.n, r.loglik.n_observed_transfers);
    let rule = "-".repeat(20 + 3 * W);
    row(&mut out, "", &["Amenity A".into(), "Product. G".into(), "Joint Phi".into()]);
    out.push_str(&rule);
    out.push('\n');
    for kk in 0..k {
        let mut coef = Vec::new();
        let mut errs = Vec::new();
        let sides = [
            (spec.alpha_mask()[kk], kk, r.theta_hat.amenity[kk]),
            (spec.gamma_mask()[kk], k + kk, r.theta_hat.productivity[kk]),
        ];
        for (on, idx, value) in sides {
            if !on {
                coef.push(".".into());
                errs.push(String::new());
            } else if !r.identified[idx] {
                coef.push("n.i.".into());
                errs.push(String::new());
            } else {
                coef.push(num(value));
                errs.push(se(r.std_errors[idx]));
            }
        }
        coef.push(num(r.phi_hat[kk]));
        errs.push(se(r.phi_std_errors[kk]));
        row(&mut out, &labels[kk], &coef);
        row(&mut out, "", &errs);
    }
    out.push_str(&rule);
    out.push('\n');
    if r.split_identified {
        let th = &r.theta_hat;
        for (name, v, idx) in [("sigma1", th.sigma1, 2 * k), ("sigma2", th.sigma2, 2 * k + 1), ("t", th.t, 2 * k + 2), ("s2", th.s2, 2 * k + 3)] {
            row(&mut out, name, &[num(v), se(r.std_errors[idx])]);
        }
        out.push_str(&rule);
        out.push('\n');
    }
    let _ = writeln!(out, "log L = {:.4} (matching {:.4}, transfers {:.4})", r.loglik.total, r.loglik.log_l1, r.loglik.log_l2);
    if let Some(r2) = r.r_squared {
        let _ = writeln!(out, "R2 (transfer equation) = {r2:.4}");
    }
    let _ = writeln!(
        out,
        "status: {:?}, {} iterations, gradient norm {:.3e}",
        r.convergence.status, r.convergence.iterations, r.convergence.gradient_norm
    );
    if !r.convergence.pinned.is_empty() {
        let _ = writeln!(out, "fixed at zero: {}", r.convergence.pinned.join(", "));
    }
    let _ = writeln!(out, "Standard errors from the Hessian of the log-likelihood in parentheses; n.i. = not identified.");
    out
}

pub fn hedonic_table(h: &HedonicResult) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Hedonic wage regression (OLS, {} rows)", h.rows);
    row(&mut out, "", &["coef".into()]);
    for (i, name) in h.names.iter().enumerate() {
        row(&mut out, name, &[num(h.fit.coef[i])]);
        row(&mut out, "", &[se(h.fit.std_errors.as_ref().map(|s| s[i]))]);
    }
    let _ = writeln!(out, "VSL (hedonic) = {:.4}", h.vsl_h);
    out
}
