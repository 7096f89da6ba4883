//! Monte Carlo harness for the simulation designs.
//!
//! Replication `r` draws from `ChaCha8Rng::seed_from_u64(base_seed)` on stream
//! `r`, so a report depends only on the configuration and never on the thread
//! count or execution order.

pub mod designs;
pub mod report;
pub mod suite;

pub use designs::{
    beta25_density, concentration, fixed_draws, functional_space, gen_factor, gen_functional, gen_gaussian, generate,
    replication_rng, solve_cstar, true_asf, Dataset, DesignKind, FixedDraws, ScenarioConfig, Truth,
};
pub use report::{mad, median, median_bias, AsfCurves, EstimatorSummary, MonteCarloReport, ReplicationRecord};
pub use suite::{AlphaPolicy, BuiltinEstimator, ConstantEstimator, Estimate, McEstimator, ReplicationContext};

use log::{debug, info};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Largest tolerated share of failed replications per estimator.
pub const MAX_FAILURE_SHARE: f64 = 0.2;

/// Run `cfg.reps` replications of every estimator in `suite`.
pub fn run_monte_carlo(
    cfg: &ScenarioConfig,
    suite: &[Box<dyn McEstimator>],
    policy: AlphaPolicy,
) -> Result<MonteCarloReport> {
    cfg.validate()?;
    if suite.is_empty() {
        return Err(Error::InvalidParameter("estimator suite is empty".into()));
    }
    if cfg.reps == 0 {
        return Err(Error::InvalidParameter("need at least one replication".into()));
    }
    let fixed = fixed_draws(cfg);
    info!("running {} replications of {:?} (n = {})", cfg.reps, cfg.kind, cfg.n);

    let records: Vec<ReplicationRecord> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| {
            let outcomes = match generate(cfg, &fixed, rep as u64) {
                Ok(data) => {
                    let ctx = ReplicationContext::new(&data, policy);
                    suite
                        .iter()
                        .map(|est| match est.estimate(&ctx) {
                            Ok(e) => Ok((e.beta1, e.target, e.rejects())),
                            Err(err) => {
                                debug!("replication {rep}, {}: {err}", est.name());
                                Err(err.to_string())
                            }
                        })
                        .collect()
                }
                Err(err) => vec![Err(err.to_string()); suite.len()],
            };
            ReplicationRecord { rep, outcomes }
        })
        .collect();

    let names: Vec<String> = suite.iter().map(|e| e.name()).collect();
    let report = MonteCarloReport::aggregate(cfg.clone(), names, records);
    for row in &report.rows {
        if row.failures as f64 > MAX_FAILURE_SHARE * cfg.reps as f64 {
            return Err(Error::ExperimentFailed { failed: row.failures, total: cfg.reps });
        }
    }
    Ok(report)
}

/// Convenience wrapper for the built-in estimators.
pub fn run_builtin(cfg: &ScenarioConfig, estimators: &[BuiltinEstimator], policy: AlphaPolicy) -> Result<MonteCarloReport> {
    let suite: Vec<Box<dyn McEstimator>> =
        estimators.iter().map(|&e| Box::new(e) as Box<dyn McEstimator>).collect();
    run_monte_carlo(cfg, &suite, policy)
}

/// Pointwise median ASF across replications on `points` evenly spaced values
/// of `y₂` over its population 5th–95th percentile range, with `z₁ = 0`.
pub fn asf_curves(
    cfg: &ScenarioConfig,
    estimators: &[BuiltinEstimator],
    policy: AlphaPolicy,
    points: usize,
) -> Result<AsfCurves> {
    cfg.validate()?;
    if points < 2 {
        return Err(Error::InvalidParameter("need at least two ASF points".into()));
    }
    let fixed = fixed_draws(cfg);
    let q = 1.644_853_626_951_472_2;
    let grid: Vec<f64> = (0..points).map(|k| -q + 2.0 * q * k as f64 / (points - 1) as f64).collect();

    let per_rep: Vec<Result<(Truth, Vec<Option<Vec<f64>>>)>> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| {
            let data = generate(cfg, &fixed, rep as u64)?;
            let ctx = ReplicationContext::new(&data, policy);
            let curves = estimators
                .iter()
                .map(|est| {
                    est.estimate(&ctx)
                        .ok()
                        .and_then(|e| e.model)
                        .and_then(|m| suite::model_asf(&m, &grid).ok())
                        .map(|v| v.iter().copied().collect())
                })
                .collect();
            Ok((data.truth.clone(), curves))
        })
        .collect();

    let mut truth = None;
    let mut columns: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); points]; estimators.len()];
    for r in per_rep.into_iter().flatten() {
        truth.get_or_insert(r.0);
        for (e, curve) in r.1.into_iter().enumerate() {
            if let Some(curve) = curve {
                for (k, v) in curve.into_iter().enumerate() {
                    columns[e][k].push(v);
                }
            }
        }
    }
    let truth = truth.ok_or(Error::ExperimentFailed { failed: cfg.reps, total: cfg.reps })?;
    let estimates = columns
        .into_iter()
        .map(|col| col.into_iter().map(|mut v| if v.is_empty() { f64::NAN } else { median(&mut v) }).collect())
        .collect();
    let true_curve = grid.iter().map(|&y2| true_asf(&truth, y2, 0.0)).collect();
    Ok(AsfCurves {
        y2: grid,
        names: estimators.iter().map(|e| e.label().to_string()).collect(),
        estimates,
        truth: true_curve,
    })
}
