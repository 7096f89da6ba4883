//! CSV ingestion and emission.
//!
//! Instruments are laid out as the functional grid columns (if any) followed by
//! the Euclidean instrument columns, then the exogenous regressors that are not
//! already listed as instruments.

use std::collections::HashMap;
use std::path::Path;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use regcf::{InstrumentSample, InstrumentSpace};

use crate::config::RunConfig;
use crate::error::CliError;

/// Parsed and validated input data.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestedData {
    pub outcome_name: String,
    pub regressor_names: Vec<String>,
    /// Names of the instrument coordinates, in storage order.
    pub instrument_names: Vec<String>,
    pub y: DVector<f64>,
    pub y2: DMatrix<f64>,
    pub endog_mask: Vec<bool>,
    /// Instruments as read (after optional standardization).
    pub raw_instruments: InstrumentSample,
    pub instruments: InstrumentSample,
    /// Number of leading functional coordinates.
    pub grid_len: usize,
    pub dropped_rows: usize,
}

impl IngestedData {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Euclidean instrument block, the design for the OLS first stage.
    pub fn linear_design(&self) -> Result<DMatrix<f64>, CliError> {
        if self.grid_len > 0 {
            return Err(CliError::Config("2SCMLE needs finite-dimensional instruments".into()));
        }
        Ok(self.raw_instruments.values().clone())
    }
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.to_ascii_lowercase().as_str(), "" | "na" | "nan" | "." | "null")
}

fn standardize(col: &mut [f64]) {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        col.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }
}

fn is_binary(col: &[f64]) -> bool {
    col.iter().all(|&v| v == 0.0 || v == 1.0)
}

/// Read `(t, w)` rows from a sidecar grid file with a header.
pub fn read_grid(path: &Path) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| {
        CliError::Data(format!("cannot read grid file {}: {e}", path.display()))
    })?;
    let (mut t, mut w) = (Vec::new(), Vec::new());
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(CliError::Data(format!("grid file row {}: expected two values (t, w)", row + 1)));
        }
        let parse = |s: &str| {
            s.parse::<f64>().map_err(|_| CliError::Data(format!("grid file row {}: non-numeric '{s}'", row + 1)))
        };
        t.push(parse(&rec[0])?);
        w.push(parse(&rec[1])?);
    }
    Ok((t, w))
}

/// Columns requested by the configuration, resolved against the header.
struct Layout {
    outcome: String,
    regressors: Vec<String>,
    functional: Vec<String>,
    euclidean: Vec<String>,
}

fn layout(cfg: &RunConfig, header: &[String]) -> Result<Layout, CliError> {
    let outcome = cfg.outcome.clone().ok_or_else(|| CliError::Config("outcome is not set".into()))?;
    if cfg.regressors.is_empty() {
        return Err(CliError::Config("regressors is empty".into()));
    }
    for e in &cfg.endogenous {
        if !cfg.regressors.contains(e) {
            return Err(CliError::Config(format!("endogenous column '{e}' is not among the regressors")));
        }
    }
    let functional = match &cfg.functional_prefix {
        Some(prefix) => header.iter().filter(|h| h.starts_with(prefix.as_str())).cloned().collect(),
        None => cfg.functional_columns.clone(),
    };
    let mut euclidean = cfg.instruments.clone();
    if cfg.exogenous_as_instruments {
        for r in cfg.regressors.iter().filter(|r| !cfg.endogenous.contains(r)) {
            if !euclidean.contains(r) {
                euclidean.push(r.clone());
            }
        }
    }
    if functional.is_empty() && euclidean.is_empty() {
        return Err(CliError::Config("no instruments configured".into()));
    }
    for name in std::iter::once(&outcome).chain(&cfg.regressors).chain(&functional).chain(&euclidean) {
        if !header.contains(name) {
            return Err(CliError::Config(format!("column '{name}' not found in the data header")));
        }
    }
    Ok(Layout { outcome, regressors: cfg.regressors.clone(), functional, euclidean })
}

/// Read, filter and validate the data described by `cfg`.
pub fn ingest_csv(path: &Path, cfg: &RunConfig) -> Result<IngestedData, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let header: Vec<String> = reader.headers()?.iter().map(String::from).collect();
    let lay = layout(cfg, &header)?;
    let index: HashMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();

    let mut wanted: Vec<&str> = vec![lay.outcome.as_str()];
    for name in lay.regressors.iter().chain(&lay.functional).chain(&lay.euclidean) {
        if !wanted.contains(&name.as_str()) {
            wanted.push(name);
        }
    }
    let mut columns: HashMap<&str, Vec<f64>> = wanted.iter().map(|&w| (w, Vec::new())).collect();
    let mut dropped = 0;
    let mut row_buf = Vec::with_capacity(wanted.len());
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        row_buf.clear();
        let mut missing = false;
        for &name in &wanted {
            let cell = rec.get(index[name]).unwrap_or("");
            if is_missing(cell) {
                missing = true;
                break;
            }
            let v: f64 = cell.parse().map_err(|_| {
                CliError::Data(format!("row {}, column '{name}': non-numeric value '{cell}'", row + 2))
            })?;
            if !v.is_finite() {
                return Err(CliError::Data(format!("row {}, column '{name}': non-finite value", row + 2)));
            }
            row_buf.push(v);
        }
        if missing {
            dropped += 1;
            continue;
        }
        for (&name, &v) in wanted.iter().zip(&row_buf) {
            columns.get_mut(name).expect("wanted column").push(v);
        }
    }
    if dropped > 0 {
        warn!("dropped {dropped} row(s) with missing values");
    }
    let n = columns[lay.outcome.as_str()].len();
    if n == 0 {
        return Err(CliError::Data("no complete rows after dropping missing values".into()));
    }
    info!("read {n} complete row(s) from {}", path.display());

    let y = &columns[lay.outcome.as_str()];
    if let Some(bad) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(CliError::Data(format!("outcome '{}' must be binary (0/1); found {bad}", lay.outcome)));
    }

    if cfg.standardize {
        let exogenous: Vec<&String> = lay
            .regressors
            .iter()
            .filter(|r| !cfg.endogenous.contains(r))
            .chain(lay.euclidean.iter())
            .collect();
        for name in exogenous {
            let col = columns.get_mut(name.as_str()).expect("wanted column");
            if !is_binary(col) {
                standardize(col);
            }
        }
    }

    let column = |name: &str| DVector::from_column_slice(&columns[name]);
    let y = column(&lay.outcome);
    let y2 = DMatrix::from_columns(&lay.regressors.iter().map(|r| column(r)).collect::<Vec<_>>());
    let endog_mask = lay.regressors.iter().map(|r| cfg.endogenous.contains(r)).collect();
    let instrument_names: Vec<String> = lay.functional.iter().chain(&lay.euclidean).cloned().collect();
    let z = DMatrix::from_columns(&instrument_names.iter().map(|c| column(c)).collect::<Vec<_>>());

    let space = if lay.functional.is_empty() {
        InstrumentSpace::euclidean(lay.euclidean.len())?
    } else {
        let grid_path = cfg.grid_file.as_ref().ok_or_else(|| CliError::Config("grid_file is not set".into()))?;
        let (t, w) = read_grid(grid_path)?;
        if t.len() != lay.functional.len() {
            return Err(CliError::Data(format!(
                "grid file has {} points but {} functional columns were given",
                t.len(),
                lay.functional.len()
            )));
        }
        let space = InstrumentSpace::weighted_grid(t, w)?;
        if lay.euclidean.is_empty() { space } else { space.with_euclidean_block(lay.euclidean.len())? }
    };
    let raw_instruments = InstrumentSample::new(z, space)?;
    let instruments = raw_instruments.center()?;
    Ok(IngestedData {
        outcome_name: lay.outcome,
        regressor_names: lay.regressors,
        instrument_names,
        y,
        y2,
        endog_mask,
        raw_instruments,
        instruments,
        grid_len: lay.functional.len(),
        dropped_rows: dropped,
    })
}

/// Write `data` as CSV (outcome, regressors, instrument-only columns) and, for
/// functional instruments, the `(t, w)` sidecar grid file.
pub fn emit_csv(data: &IngestedData, path: &Path, grid_path: Option<&Path>) -> Result<(), CliError> {
    let mut names = vec![data.outcome_name.clone()];
    names.extend(data.regressor_names.iter().cloned());
    let inst: Vec<usize> =
        (0..data.instrument_names.len()).filter(|&k| !data.regressor_names.contains(&data.instrument_names[k])).collect();
    names.extend(inst.iter().map(|&k| data.instrument_names[k].clone()));

    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    w.write_record(&names)?;
    let z = data.raw_instruments.values();
    for i in 0..data.n() {
        let mut rec = vec![data.y[i].to_string()];
        rec.extend((0..data.y2.ncols()).map(|k| data.y2[(i, k)].to_string()));
        rec.extend(inst.iter().map(|&k| z[(i, k)].to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;

    if let InstrumentSpace::WeightedGrid { grid, weights, .. } = data.raw_instruments.space() {
        let grid_path = grid_path.ok_or_else(|| CliError::Config("functional data needs a grid file path".into()))?;
        let mut g = csv::Writer::from_path(grid_path)?;
        g.write_record(["t", "w"])?;
        for (t, wt) in grid.iter().zip(weights) {
            g.write_record([t.to_string(), wt.to_string()])?;
        }
        g.flush().map_err(|e| CliError::io(grid_path, e))?;
    }
    Ok(())
}
