//! CSV datasets: one matched pair per row, header required.

use std::path::Path;

use matchwage_core::model::Covariates;
use matchwage_core::MatchSample;
use serde::Serialize;

use crate::error::CliError;

/// How the transfer column relates to the transfer entering the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferTransform {
    Identity,
    /// The file holds wage levels; the model uses their logs.
    Log,
    /// The file already holds transformed values; the label is informational.
    Custom(String),
}

impl TransferTransform {
    pub fn parse(tag: &str) -> Self {
        match tag {
            "identity" => Self::Identity,
            "log" => Self::Log,
            other => Self::Custom(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSchema {
    pub worker_columns: Vec<String>,
    pub firm_columns: Vec<String>,
    pub transfer_column: String,
    pub transform: TransferTransform,
    /// Optional positive sampling weights, normalized on load.
    pub weight_column: Option<String>,
    /// Field value marking an absent transfer.
    pub missing_marker: String,
}

impl DatasetSchema {
    pub fn new(
        worker_columns: Vec<String>,
        firm_columns: Vec<String>,
        transfer_column: String,
        transform: TransferTransform,
        weight_column: Option<String>,
        missing_marker: String,
    ) -> Result<Self, CliError> {
        let mut all: Vec<&String> = worker_columns.iter().chain(&firm_columns).chain([&transfer_column]).collect();
        all.extend(weight_column.as_ref());
        for (i, a) in all.iter().enumerate() {
            if all[..i].contains(a) {
                return Err(CliError::Config(format!("column `{a}` is used twice in the schema")));
            }
        }
        Ok(Self { worker_columns, firm_columns, transfer_column, transform, weight_column, missing_marker })
    }

    fn columns(&self) -> Vec<&str> {
        let mut c: Vec<&str> = self.worker_columns.iter().chain(&self.firm_columns).map(String::as_str).collect();
        c.push(&self.transfer_column);
        c.extend(self.weight_column.as_deref());
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LoadSummary {
    pub rows: usize,
    pub missing_transfers: usize,
}

pub fn load_sample(path: &Path, schema: &DatasetSchema) -> Result<(MatchSample, LoadSummary), CliError> {
    let shown = path.display().to_string();
    let data_err = |line: u64, message: String| CliError::Data { path: shown.clone(), line, message };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Io(format!("cannot open {shown}: {e}")))?;
    let header = rdr.headers().map_err(|e| data_err(1, e.to_string()))?.clone();
    let index: Vec<usize> = schema
        .columns()
        .iter()
        .map(|c| header.iter().position(|h| h == *c).ok_or_else(|| data_err(1, format!("column `{c}` not in header"))))
        .collect::<Result<_, _>>()?;
    let (dx, dy) = (schema.worker_columns.len(), schema.firm_columns.len());
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut transfers = Vec::new();
    let mut weights = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            data_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let number = |k: usize| -> Result<f64, CliError> {
            let field = &rec[index[k]];
            field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| data_err(line, format!("column `{}`: `{field}` is not a finite number", &header[index[k]])))
        };
        for k in 0..dx {
            xs.push(number(k)?);
        }
        for k in dx..dx + dy {
            ys.push(number(k)?);
        }
        let raw = &rec[index[dx + dy]];
        transfers.push(if raw == schema.missing_marker {
            None
        } else {
            let v = number(dx + dy)?;
            Some(match schema.transform {
                TransferTransform::Log if v <= 0.0 => {
                    return Err(data_err(line, format!("wage {v} is not positive under the log transform")));
                }
                TransferTransform::Log => v.ln(),
                _ => v,
            })
        });
        if schema.weight_column.is_some() {
            let w = number(dx + dy + 1)?;
            if w <= 0.0 {
                return Err(data_err(line, format!("weight {w} is not positive")));
            }
            weights.push(w);
        }
    }
    let n = transfers.len();
    if n == 0 {
        return Err(data_err(1, "no data rows".into()));
    }
    let summary = LoadSummary { rows: n, missing_transfers: transfers.iter().filter(|t| t.is_none()).count() };
    let (x, y) = (Covariates::new(n, dx, xs)?, Covariates::new(n, dy, ys)?);
    let sample = if schema.weight_column.is_some() {
        let total: f64 = weights.iter().sum();
        MatchSample::with_weights(x, y, transfers, weights.iter().map(|w| w / total).collect())?
    } else {
        MatchSample::new(x, y, transfers)?
    };
    log::info!("loaded {shown}: {} rows, {} missing transfers", summary.rows, summary.missing_transfers);
    Ok((sample, summary))
}

/// Writes `sample` so that [`load_sample`] with the same schema reads it back.
/// Weights are written as `n w_i`.
pub fn save_sample(path: &Path, sample: &MatchSample, schema: &DatasetSchema) -> Result<(), CliError> {
    if sample.workers().cols() != schema.worker_columns.len() || sample.firms().cols() != schema.firm_columns.len() {
        return Err(CliError::Config(format!(
            "schema has {} worker and {} firm columns, sample has {} and {}",
            schema.worker_columns.len(),
            schema.firm_columns.len(),
            sample.workers().cols(),
            sample.firms().cols()
        )));
    }
    let io_err = |e: csv::Error| CliError::Io(format!("cannot write {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    w.write_record(schema.columns()).map_err(io_err)?;
    let n = sample.len() as f64;
    for i in 0..sample.len() {
        let mut rec: Vec<String> = sample.workers().row(i).iter().chain(sample.firms().row(i)).map(|v| v.to_string()).collect();
        rec.push(match sample.transfers()[i] {
            None => schema.missing_marker.clone(),
            Some(t) if schema.transform == TransferTransform::Log => t.exp().to_string(),
            Some(t) => t.to_string(),
        });
        if schema.weight_column.is_some() {
            rec.push((sample.weights()[i] * n).to_string());
        }
        w.write_record(&rec).map_err(io_err)?;
    }
    w.flush().map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}
