//! Metrics, tables and plot-ready curves.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::designs::ScenarioConfig;

/// Median with the midpoint rule for even lengths. Sorts `v` in place.
pub fn median(v: &mut [f64]) -> f64 {
    assert!(!v.is_empty(), "median of an empty sample");
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// `median(estimate − target)`.
pub fn median_bias(errors: &[f64]) -> f64 {
    median(&mut errors.to_vec())
}

/// `median |x − median x|`.
pub fn mad(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    let center = median(&mut v);
    let mut dev: Vec<f64> = values.iter().map(|x| (x - center).abs()).collect();
    median(&mut dev)
}

/// Per-replication outcomes, one entry per estimator: `(β̂₁, target, rejected)` or the failure message.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub rep: usize,
    pub outcomes: Vec<std::result::Result<(f64, f64, bool), String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: String,
    pub median_bias: f64,
    pub mad: f64,
    pub rejection_rate: f64,
    pub successes: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub config: ScenarioConfig,
    pub rows: Vec<EstimatorSummary>,
    pub replications: Vec<ReplicationRecord>,
}

impl MonteCarloReport {
    /// Summaries computed from records sorted by replication index.
    pub fn aggregate(config: ScenarioConfig, names: Vec<String>, mut records: Vec<ReplicationRecord>) -> Self {
        records.sort_by_key(|r| r.rep);
        let rows = names
            .into_iter()
            .enumerate()
            .map(|(e, estimator)| {
                let ok: Vec<(f64, f64, bool)> =
                    records.iter().filter_map(|r| r.outcomes[e].as_ref().ok().copied()).collect();
                let failures = records.len() - ok.len();
                let errors: Vec<f64> = ok.iter().map(|(b, t, _)| b - t).collect();
                let (median_bias, mad_value, rejection_rate) = if ok.is_empty() {
                    (f64::NAN, f64::NAN, f64::NAN)
                } else {
                    let rejections = ok.iter().filter(|o| o.2).count();
                    (median_bias(&errors), mad(&errors), rejections as f64 / ok.len() as f64)
                };
                EstimatorSummary {
                    estimator,
                    median_bias,
                    mad: mad_value,
                    rejection_rate,
                    successes: ok.len(),
                    failures,
                }
            })
            .collect();
        MonteCarloReport { config, rows, replications: records }
    }

    pub fn row(&self, name: &str) -> Option<&EstimatorSummary> {
        self.rows.iter().find(|r| r.estimator == name)
    }

    /// `estimator,median_bias,mad,rejection_rate,successes,failures`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row).map_err(io_error)?;
        }
        w.flush().map_err(|e| Error::InvalidParameter(e.to_string()))
    }

    /// Raw per-replication estimates, one row per (replication, estimator).
    pub fn write_raw_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["rep", "estimator", "beta1", "target", "reject", "error"]).map_err(io_error)?;
        for r in &self.replications {
            for (e, o) in r.outcomes.iter().enumerate() {
                let name = &self.rows[e].estimator;
                let rec = match o {
                    Ok((b, t, rej)) => [r.rep.to_string(), name.clone(), b.to_string(), t.to_string(), rej.to_string(), String::new()],
                    Err(msg) => [r.rep.to_string(), name.clone(), String::new(), String::new(), String::new(), msg.clone()],
                };
                w.write_record(&rec).map_err(io_error)?;
            }
        }
        w.flush().map_err(|e| Error::InvalidParameter(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidParameter(e.to_string()))
    }
}

fn io_error(e: csv::Error) -> Error {
    Error::InvalidParameter(format!("CSV output failed: {e}"))
}

/// ASF curves over a common `y₂` grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AsfCurves {
    pub y2: Vec<f64>,
    pub names: Vec<String>,
    /// One curve per estimator, aligned with `y2`.
    pub estimates: Vec<Vec<f64>>,
    pub truth: Vec<f64>,
}

impl AsfCurves {
    /// `y2,asf_<name>...,asf_true`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["y2".to_string()];
        header.extend(self.names.iter().map(|n| format!("asf_{n}")));
        header.push("asf_true".into());
        w.write_record(&header).map_err(io_error)?;
        for (k, y2) in self.y2.iter().enumerate() {
            let mut rec = vec![y2.to_string()];
            rec.extend(self.estimates.iter().map(|c| c[k].to_string()));
            rec.push(self.truth[k].to_string());
            w.write_record(&rec).map_err(io_error)?;
        }
        w.flush().map_err(|e| Error::InvalidParameter(e.to_string()))
    }
}
