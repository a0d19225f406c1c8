//! TOML run configuration and `--set` overrides.

use std::path::Path;

use matchwage_core::analysis::{FirmTransform, HedonicSpec, TransferScale, VslUnits};
use matchwage_core::equilibrium::SolverConfig;
use matchwage_core::estimator::{EstimatorOptions, HessianKind, SigmaParam};
use matchwage_core::optim::BfgsConfig;
use matchwage_core::sim::Grid;
use matchwage_core::model::Covariates;
use matchwage_core::{BasisSpec, Theta};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::io::{DatasetSchema, TransferTransform};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub basis: BasisSection,
    pub simulate: Option<SimulateSection>,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    pub vsl: Option<VslSection>,
    pub hedonic: Option<HedonicSection>,
    pub counterfactual: Option<CounterfactualSection>,
    #[serde(default)]
    pub gradcheck: GradcheckSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<String>,
    #[serde(default)]
    pub worker_columns: Vec<String>,
    #[serde(default)]
    pub firm_columns: Vec<String>,
    #[serde(default = "default_transfer_column")]
    pub transfer_column: String,
    /// `identity`, `log`, or any other label for a transform already applied.
    #[serde(default = "default_transform")]
    pub transform: String,
    pub weight_column: Option<String>,
    #[serde(default)]
    pub missing_marker: String,
}

fn default_transfer_column() -> String {
    "wage".into()
}

fn default_transform() -> String {
    "identity".into()
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            worker_columns: Vec::new(),
            firm_columns: Vec::new(),
            transfer_column: default_transfer_column(),
            transform: default_transform(),
            weight_column: None,
            missing_marker: String::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSection {
    #[serde(default)]
    pub terms: Vec<TermSection>,
}

/// One product basis `x_worker * y_firm`; an absent side contributes 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSection {
    pub worker: Option<String>,
    pub firm: Option<String>,
    pub alpha: bool,
    pub gamma: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub workers: GridSection,
    pub firms: GridSection,
    pub theta: ThetaSection,
    pub n: usize,
    #[serde(default)]
    pub missing_prob: f64,
}

/// Either `m` equally spaced points on `[lo, hi]` or explicit `points`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub m: Option<usize>,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub points: Option<Vec<Vec<f64>>>,
    /// Normalized to sum to one; uniform when absent.
    pub masses: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaSection {
    pub amenity: Vec<f64>,
    pub productivity: Vec<f64>,
    pub sigma1: f64,
    pub sigma2: f64,
    pub t: f64,
    pub s2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        let d = SolverConfig::default();
        Self { tol: d.tol, max_iter: d.max_iter }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub grad_tol: f64,
    pub max_iter: usize,
    pub c1: f64,
    pub c2: f64,
    pub sigma_param: SigmaParam,
    pub standard_errors: bool,
    pub hessian: HessianKind,
    pub hessian_step: f64,
    pub boundary_threshold: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let e = EstimatorOptions::default();
        Self {
            grad_tol: e.optimizer.grad_tol,
            max_iter: e.optimizer.max_iter,
            c1: e.optimizer.c1,
            c2: e.optimizer.c2,
            sigma_param: e.sigma_param,
            standard_errors: e.standard_errors,
            hessian: e.hessian,
            hessian_step: e.hessian_step,
            boundary_threshold: e.boundary_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VslSection {
    /// Firm column holding fatality risk.
    pub risk_column: String,
    pub mean_earnings: f64,
    #[serde(default = "one")]
    pub risk_unit_scale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HedonicSection {
    /// Defaults to all worker columns of the data.
    pub worker_columns: Option<Vec<String>>,
    /// Defaults to all firm columns of the data.
    pub firm_columns: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterfactualSection {
    /// `identity` or `cap`.
    pub transform: String,
    pub column: Option<String>,
    pub max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    /// Relative central-difference step.
    pub step: f64,
    /// Largest accepted relative error.
    pub tol: f64,
    /// Absolute error below which a coordinate always passes.
    pub abs_floor: f64,
    /// Spread of the random coefficients drawn around the starting point.
    pub spread: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self { step: 1e-6, tol: 1e-5, abs_floor: 1e-8, spread: 0.5 }
    }
}

/// Reads a config file and applies `key.path=value` overrides.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Config, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<toml::Table>().map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    table.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<(), CliError> {
    let (key, raw) = item.split_once('=').ok_or_else(|| CliError::Usage(format!("override `{item}` is not key=value")))?;
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| CliError::Usage(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn position(names: &[String], name: &str, side: &str) -> Result<usize, CliError> {
    names
        .iter()
        .position(|c| c == name)
        .ok_or_else(|| CliError::Config(format!("`{name}` is not a {side} column")))
}

impl Config {
    pub fn schema(&self) -> Result<DatasetSchema, CliError> {
        let d = &self.data;
        if d.worker_columns.is_empty() || d.firm_columns.is_empty() {
            return Err(CliError::Config("data.worker_columns and data.firm_columns are required".into()));
        }
        DatasetSchema::new(
            d.worker_columns.clone(),
            d.firm_columns.clone(),
            d.transfer_column.clone(),
            TransferTransform::parse(&d.transform),
            d.weight_column.clone(),
            d.missing_marker.clone(),
        )
    }

    pub fn basis(&self) -> Result<BasisSpec, CliError> {
        if self.basis.terms.is_empty() {
            return Err(CliError::Config("basis.terms is empty".into()));
        }
        let d = &self.data;
        let mut items = Vec::new();
        for t in &self.basis.terms {
            let w = t.worker.as_deref().map(|c| position(&d.worker_columns, c, "worker")).transpose()?;
            let f = t.firm.as_deref().map(|c| position(&d.firm_columns, c, "firm")).transpose()?;
            items.push((w.map_or(0, |i| i + 1), f.map_or(0, |i| i + 1), t.alpha, t.gamma));
        }
        Ok(BasisSpec::products(&items)?)
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig { tol: self.solver.tol, max_iter: self.solver.max_iter }
    }

    pub fn estimator(&self) -> EstimatorOptions {
        let o = &self.optimizer;
        EstimatorOptions {
            solver: self.solver(),
            optimizer: BfgsConfig { grad_tol: o.grad_tol, max_iter: o.max_iter, c1: o.c1, c2: o.c2 },
            sigma_param: o.sigma_param,
            standard_errors: o.standard_errors,
            hessian: o.hessian,
            hessian_step: o.hessian_step,
            boundary_threshold: o.boundary_threshold,
        }
    }

    pub fn transfer_scale(&self) -> TransferScale {
        match TransferTransform::parse(&self.data.transform) {
            TransferTransform::Log => TransferScale::Log,
            _ => TransferScale::Identity,
        }
    }

    fn vsl_section(&self) -> Result<&VslSection, CliError> {
        self.vsl.as_ref().ok_or_else(|| CliError::Config("missing [vsl] section".into()))
    }

    pub fn vsl_units(&self) -> Result<VslUnits, CliError> {
        let v = self.vsl_section()?;
        Ok(VslUnits { mean_earnings: v.mean_earnings, risk_unit_scale: v.risk_unit_scale })
    }

    /// 0-based firm column of the risk covariate.
    pub fn risk_index(&self) -> Result<usize, CliError> {
        position(&self.data.firm_columns, &self.vsl_section()?.risk_column, "firm")
    }

    pub fn hedonic(&self) -> Result<(HedonicSpec, Vec<String>), CliError> {
        let d = &self.data;
        let h = self.hedonic.clone().unwrap_or_default();
        let wc = h.worker_columns.unwrap_or_else(|| d.worker_columns.clone());
        let fc = h.firm_columns.unwrap_or_else(|| d.firm_columns.clone());
        let risk = self.risk_index()?;
        let spec = HedonicSpec {
            worker_columns: wc.iter().map(|c| position(&d.worker_columns, c, "worker")).collect::<Result<_, _>>()?,
            firm_columns: fc.iter().map(|c| position(&d.firm_columns, c, "firm")).collect::<Result<_, _>>()?,
            risk_column: risk,
        };
        let names = std::iter::once("const".to_string()).chain(wc).chain(fc).collect();
        Ok((spec, names))
    }

    pub fn firm_transform(&self) -> Result<FirmTransform, CliError> {
        let c = self.counterfactual.as_ref().ok_or_else(|| CliError::Config("missing [counterfactual] section".into()))?;
        match c.transform.as_str() {
            "identity" => Ok(FirmTransform::Identity),
            "cap" => {
                let col = c.column.as_deref().ok_or_else(|| CliError::Config("counterfactual.column is required for a cap".into()))?;
                let max = c.max.ok_or_else(|| CliError::Config("counterfactual.max is required for a cap".into()))?;
                Ok(FirmTransform::Cap { column: position(&self.data.firm_columns, col, "firm")?, max })
            }
            other => Err(CliError::Config(format!("unknown counterfactual transform `{other}`"))),
        }
    }

    pub fn simulate_section(&self) -> Result<&SimulateSection, CliError> {
        self.simulate.as_ref().ok_or_else(|| CliError::Config("missing [simulate] section".into()))
    }
}

impl GridSection {
    pub fn build(&self, side: &str) -> Result<Grid, CliError> {
        let points = match (&self.points, self.m, self.lo, self.hi) {
            (Some(p), None, None, None) => Covariates::from_rows(p)?,
            (None, Some(m), Some(lo), Some(hi)) => {
                if m < 2 {
                    return Err(CliError::Config(format!("simulate.{side}.m must be at least 2")));
                }
                Covariates::new(m, 1, (0..m).map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64).collect())?
            }
            _ => return Err(CliError::Config(format!("simulate.{side} needs either `points` or `m`, `lo` and `hi`"))),
        };
        let masses = match &self.masses {
            Some(raw) => {
                let total: f64 = raw.iter().sum();
                raw.iter().map(|v| v / total).collect()
            }
            None => vec![1.0 / points.rows() as f64; points.rows()],
        };
        Ok(Grid::new(points, masses)?)
    }
}

impl ThetaSection {
    pub fn theta(&self) -> Result<Theta, CliError> {
        Ok(Theta::new(self.amenity.clone(), self.productivity.clone(), self.sigma1, self.sigma2, self.t, self.s2)?)
    }
}
