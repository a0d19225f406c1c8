//! Command-line front end for `matchwage-core`: CSV datasets, TOML
//! configuration, JSON reports and text tables.
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 usage or configuration
//! error, 3 the computation did not converge or failed its accuracy check.

pub mod config;
pub mod error;
pub mod io;
pub mod report;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use matchwage_core::analysis::{counterfactual, hedonic_baseline, vsl, CounterfactualResult, TransferScale};
use matchwage_core::equilibrium::SolverConfig;
use matchwage_core::estimator::{
    estimate, estimate_concentrated, free_parameter_count, initial_theta, lr_statistic, EstimationReport,
};
use matchwage_core::likelihood::{gradient, log_likelihood};
use matchwage_core::sim::{build_market, draw_sample};
use matchwage_core::{BasisSpec, MatchSample, Theta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

pub use config::Config;
pub use error::CliError;
use report::Envelope;

/// Environment variable holding the log filter (`error` .. `trace`).
pub const LOG_ENV: &str = "MATCHWAGE_LOG";

#[derive(Debug, Parser)]
#[command(name = "matchwage", version, about = "Matching-market estimation with observed transfers")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set solver.tol=1e-12`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Data file; overrides `data.path`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Output file (CSV for `simulate`, JSON report otherwise).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Also write the text table to this file.
    #[arg(long, global = true)]
    table: Option<PathBuf>,
    /// Do not print the text table.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve a ground-truth grid market and draw a sample from it.
    Simulate,
    /// Maximum-likelihood estimation.
    Estimate {
        /// Profile out the scale parameters and intercept.
        #[arg(long)]
        concentrated: bool,
    },
    /// Compare the analytic gradient with central finite differences.
    Gradcheck,
    /// Structural value of statistical life.
    Vsl {
        /// Estimate report to take parameters from; estimates afresh when absent.
        #[arg(long)]
        theta: Option<PathBuf>,
    },
    /// Equilibrium before and after a change to firm covariates.
    Counterfactual {
        #[arg(long)]
        theta: Option<PathBuf>,
    },
    /// Hedonic wage regression baseline.
    Hedonic,
    /// Likelihood-ratio test between two nested estimate reports.
    Lrtest {
        #[arg(long)]
        restricted: PathBuf,
        #[arg(long)]
        unrestricted: PathBuf,
    },
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

struct Ctx {
    cfg: Config,
    common: Common,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = config::load(cli.common.config.as_deref(), &cli.common.set)?;
    if let Some(d) = &cli.common.data {
        cfg.data.path = Some(d.display().to_string());
    }
    let ctx = Ctx { cfg, common: cli.common.clone() };
    match &cli.command {
        Command::Simulate => simulate(&ctx),
        Command::Estimate { concentrated } => run_estimate(&ctx, *concentrated),
        Command::Gradcheck => gradcheck(&ctx),
        Command::Vsl { theta } => run_vsl(&ctx, theta.as_deref()),
        Command::Counterfactual { theta } => run_counterfactual(&ctx, theta.as_deref()),
        Command::Hedonic => run_hedonic(&ctx),
        Command::Lrtest { restricted, unrestricted } => lrtest(&ctx, restricted, unrestricted),
    }
}

impl Ctx {
    fn sample(&self) -> Result<MatchSample, CliError> {
        let path = self.cfg.data.path.as_deref().ok_or_else(|| CliError::Usage("no data file: pass --data or set data.path".into()))?;
        Ok(io::load_sample(Path::new(path), &self.cfg.schema()?)?.0)
    }

    fn labels(&self) -> Vec<String> {
        self.cfg
            .basis
            .terms
            .iter()
            .map(|t| match (&t.worker, &t.firm) {
                (Some(w), Some(f)) => format!("{w} x {f}"),
                (Some(w), None) => w.clone(),
                (None, Some(f)) => f.clone(),
                (None, None) => "const".into(),
            })
            .collect()
    }

    fn emit<T: Serialize>(&self, command: &str, result: T, table: &str) -> Result<(), CliError> {
        if let Some(out) = &self.common.out {
            Envelope::new(command, self.common.seed, &self.cfg, result).write(out)?;
        }
        if let Some(t) = &self.common.table {
            report::write_text(t, table)?;
        }
        if !self.common.quiet {
            print!("{table}");
        }
        Ok(())
    }

    /// Parameters from a saved estimate, or a fresh full estimate.
    fn theta(&self, from: Option<&Path>, spec: &BasisSpec, sample: Option<&MatchSample>) -> Result<Theta, CliError> {
        let r = match (from, sample) {
            (Some(p), _) => report::read_estimate(p)?,
            (None, Some(s)) => fit(self, spec, s, false)?,
            (None, None) => fit(self, spec, &self.sample()?, false)?,
        };
        if r.theta_hat.k() != spec.len() {
            return Err(CliError::Config(format!("report has {} basis terms, config has {}", r.theta_hat.k(), spec.len())));
        }
        if !r.converged() {
            return Err(CliError::NotConverged("the estimate did not converge".into()));
        }
        if !r.split_identified {
            return Err(CliError::Config("amenities are not identified without observed transfers".into()));
        }
        Ok(r.theta_hat)
    }
}

fn fit(ctx: &Ctx, spec: &BasisSpec, sample: &MatchSample, concentrated: bool) -> Result<EstimationReport, CliError> {
    let opts = ctx.cfg.estimator();
    let r = if concentrated { estimate_concentrated(sample, spec, &opts)? } else { estimate(sample, spec, &opts)? };
    log::info!("estimate: {:?} after {} iterations", r.convergence.status, r.convergence.iterations);
    Ok(r)
}

fn simulate(ctx: &Ctx) -> Result<(), CliError> {
    let s = ctx.cfg.simulate_section()?;
    let spec = ctx.cfg.basis()?;
    let market = build_market(s.workers.build("workers")?, s.firms.build("firms")?, s.theta.theta()?, spec, &ctx.cfg.solver())?;
    let sample = draw_sample(&market, s.n, s.missing_prob, ctx.common.seed)?;
    let out = ctx.common.out.as_deref().ok_or_else(|| CliError::Usage("simulate needs --out".into()))?;
    io::save_sample(out, &sample, &ctx.cfg.schema()?)?;
    if !ctx.common.quiet {
        println!(
            "wrote {} matches ({} transfers observed) to {}",
            sample.len(),
            sample.observed_transfers(),
            out.display()
        );
    }
    Ok(())
}

fn run_estimate(ctx: &Ctx, concentrated: bool) -> Result<(), CliError> {
    let spec = ctx.cfg.basis()?;
    let sample = ctx.sample()?;
    let r = fit(ctx, &spec, &sample, concentrated)?;
    let table = report::estimation_table(&r, &spec, &ctx.labels());
    let converged = r.converged();
    ctx.emit("estimate", &r, &table)?;
    if converged {
        Ok(())
    } else {
        Err(CliError::NotConverged(format!("optimizer stopped with {:?}", r.convergence.optimizer_status)))
    }
}

#[derive(Debug, Serialize)]
struct GradcheckCoordinate {
    name: String,
    analytic: f64,
    finite_difference: f64,
    abs_error: f64,
    rel_error: f64,
    pass: bool,
}

#[derive(Debug, Serialize)]
struct GradcheckResult {
    theta: Theta,
    coordinates: Vec<GradcheckCoordinate>,
    /// Largest relative error over coordinates above the absolute floor.
    max_rel_error: f64,
    tol: f64,
    abs_floor: f64,
    pass: bool,
}

fn gradcheck(ctx: &Ctx) -> Result<(), CliError> {
    let spec = ctx.cfg.basis()?;
    let sample = ctx.sample()?;
    let g = &ctx.cfg.gradcheck;
    let solver = SolverConfig { tol: ctx.cfg.solver.tol.min(1e-13), max_iter: ctx.cfg.solver.max_iter.max(100_000) };
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.common.seed);
    let mut th = initial_theta(&spec, &sample);
    for k in 0..spec.len() {
        if spec.alpha_mask()[k] {
            th.amenity[k] += rng.random_range(-g.spread..=g.spread);
        }
        if spec.gamma_mask()[k] {
            th.productivity[k] += rng.random_range(-g.spread..=g.spread);
        }
    }
    th.sigma1 *= rng.random_range(0.5..2.0);
    th.sigma2 *= rng.random_range(0.5..2.0);

    let an = gradient(&th, &spec, &sample, &solver)?;
    let x = th.to_vec();
    let names = {
        let mut v: Vec<String> = ctx.labels().iter().map(|l| format!("A[{l}]")).collect();
        v.extend(ctx.labels().iter().map(|l| format!("G[{l}]")));
        v.extend(["sigma1", "sigma2", "t", "s2"].map(String::from));
        v
    };
    let mut coords = Vec::new();
    for i in 0..x.len() {
        let h = g.step * x[i].abs().max(1.0);
        let at = |d: f64| -> Result<f64, CliError> {
            let mut y = x.clone();
            y[i] += d;
            Ok(log_likelihood(&Theta::from_slice(th.k(), &y)?, &spec, &sample, &solver)?.total)
        };
        let fd = (at(h)? - at(-h)?) / (2.0 * h);
        let abs = (an[i] - fd).abs();
        let rel = if abs <= g.abs_floor { 0.0 } else { abs / fd.abs() };
        coords.push(GradcheckCoordinate {
            name: names[i].clone(),
            analytic: an[i],
            finite_difference: fd,
            abs_error: abs,
            rel_error: rel,
            pass: rel <= g.tol,
        });
    }
    let max_rel = coords.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let pass = coords.iter().all(|c| c.pass);
    let mut table = format!("{:<24}{:>18}{:>18}{:>12}\n", "parameter", "analytic", "finite diff.", "rel. error");
    for c in &coords {
        table.push_str(&format!("{:<24}{:>18.8e}{:>18.8e}{:>12.2e}\n", c.name, c.analytic, c.finite_difference, c.rel_error));
    }
    table.push_str(&format!("max relative error {max_rel:.3e} (tolerance {:.0e}): {}\n", g.tol, if pass { "PASS" } else { "FAIL" }));
    ctx.emit("gradcheck", GradcheckResult { theta: th, coordinates: coords, max_rel_error: max_rel, tol: g.tol, abs_floor: g.abs_floor, pass }, &table)?;
    if pass {
        Ok(())
    } else {
        Err(CliError::NotConverged(format!("gradient check failed: max relative error {max_rel:.3e}")))
    }
}

#[derive(Debug, Serialize)]
struct VslResult {
    risk_column: String,
    risk_coefficient: f64,
    sigma: f64,
    mean_earnings: f64,
    risk_unit_scale: f64,
    vsl: f64,
    note: &'static str,
}

const VSL_NOTE: &str = "Amenity-based VSL; it excludes any effect of fatality risk on productivity.";

fn run_vsl(ctx: &Ctx, from: Option<&Path>) -> Result<(), CliError> {
    let spec = ctx.cfg.basis()?;
    let units = ctx.cfg.vsl_units()?;
    let risk = ctx.cfg.risk_index()?;
    let th = ctx.theta(from, &spec, None)?;
    let value = vsl(&th, &spec, risk + 1, &units)?;
    let coef = if th.sigma() > 0.0 { -value / (th.sigma() * units.mean_earnings * units.risk_unit_scale) } else { 0.0 };
    let col = ctx.cfg.vsl.as_ref().map(|v| v.risk_column.clone()).unwrap_or_default();
    let table = format!(
        "Structural VSL\nrisk column {col}: amenity coefficient {coef:.6}, sigma {:.6}\nVSL = {value:.4}\n{VSL_NOTE}\n",
        th.sigma()
    );
    let result = VslResult {
        risk_column: col,
        risk_coefficient: coef,
        sigma: th.sigma(),
        mean_earnings: units.mean_earnings,
        risk_unit_scale: units.risk_unit_scale,
        vsl: value,
        note: VSL_NOTE,
    };
    ctx.emit("vsl", result, &table)
}

#[derive(Debug, Serialize)]
struct EquilibriumSummary {
    /// Matching mass per (worker class, firm class) cell, row-major.
    pi: Vec<Vec<f64>>,
    wages: Vec<Vec<f64>>,
    worker_mass: Vec<f64>,
    firm_mass: Vec<f64>,
    marginal_residual: f64,
}

#[derive(Debug, Serialize)]
struct CounterfactualReport {
    theta: Theta,
    before: EquilibriumSummary,
    after: EquilibriumSummary,
    wages_before: Vec<f64>,
    wages_after: Vec<f64>,
    level_wages_before: Option<Vec<f64>>,
    level_wages_after: Option<Vec<f64>>,
    share_changed: f64,
    share_changed_definition: &'static str,
    mean_wage_change: f64,
    gini_before: f64,
    gini_after: f64,
}

const SHARE_DEFINITION: &str =
    "L1 reassignment: half the L1 distance between each worker's firm-type distribution before and after, averaged over workers";

fn summary(eq: &matchwage_core::analysis::ClassEquilibrium) -> EquilibriumSummary {
    let rows = |m: &nalgebra::DMatrix<f64>| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
    EquilibriumSummary {
        pi: rows(&eq.pi),
        wages: rows(&eq.wages),
        worker_mass: eq.worker_mass.clone(),
        firm_mass: eq.firm_mass.clone(),
        marginal_residual: eq.marginal_residual,
    }
}

fn run_counterfactual(ctx: &Ctx, from: Option<&Path>) -> Result<(), CliError> {
    let spec = ctx.cfg.basis()?;
    let sample = ctx.sample()?;
    let transform = ctx.cfg.firm_transform()?;
    let th = ctx.theta(from, &spec, Some(&sample))?;
    let scale = ctx.cfg.transfer_scale();
    let r: CounterfactualResult = counterfactual(&th, &spec, &sample, &transform, scale, &ctx.cfg.solver()).map_err(|e| match e {
        matchwage_core::Error::Invalid(m) if m.contains("gini") && scale == TransferScale::Identity => {
            CliError::Config(format!("{m}; declare data.transform = \"log\" when transfers are log wages"))
        }
        e => e.into(),
    })?;
    let table = format!(
        "Counterfactual ({transform:?})\nshare of workers changing firm type {:.4}  [{SHARE_DEFINITION}]\nmean wage change {:+.4}\nGini {:.4} -> {:.4}\nmarginal residual after {:.2e}\n",
        r.share_changed, r.mean_wage_change, r.gini_before, r.gini_after, r.after.marginal_residual
    );
    let rep = CounterfactualReport {
        theta: th,
        before: summary(&r.before),
        after: summary(&r.after),
        wages_before: r.wages_before,
        wages_after: r.wages_after,
        level_wages_before: r.level_wages_before,
        level_wages_after: r.level_wages_after,
        share_changed: r.share_changed,
        share_changed_definition: SHARE_DEFINITION,
        mean_wage_change: r.mean_wage_change,
        gini_before: r.gini_before,
        gini_after: r.gini_after,
    };
    ctx.emit("counterfactual", rep, &table)
}

fn run_hedonic(ctx: &Ctx) -> Result<(), CliError> {
    let sample = ctx.sample()?;
    let (spec, names) = ctx.cfg.hedonic()?;
    let mut h = hedonic_baseline(&sample, &spec, &ctx.cfg.vsl_units()?)?;
    h.names = names;
    let table = report::hedonic_table(&h);
    ctx.emit("hedonic", &h, &table)
}

#[derive(Debug, Serialize)]
struct LrResult {
    statistic: f64,
    df: usize,
    p_value: f64,
}

fn lrtest(ctx: &Ctx, restricted: &Path, unrestricted: &Path) -> Result<(), CliError> {
    let (r, u) = (report::read_estimate(restricted)?, report::read_estimate(unrestricted)?);
    let (pr, pu) = (free_parameter_count(&r), free_parameter_count(&u));
    if pu <= pr {
        return Err(CliError::Usage(format!("unrestricted model has {pu} free parameters, restricted has {pr}")));
    }
    let df = pu - pr;
    let stat = lr_statistic(&r, &u);
    let chi = ChiSquared::new(df as f64).map_err(|e| CliError::Io(e.to_string()))?;
    let p = if stat <= 0.0 { 1.0 } else { chi.sf(stat) };
    let table = format!("LR statistic {stat:.4} on {df} df, p-value {p:.4}\n");
    ctx.emit("lrtest", LrResult { statistic: stat, df, p_value: p }, &table)
}
