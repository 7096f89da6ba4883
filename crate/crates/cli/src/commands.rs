//! Command dispatch and result emission.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use regcf::alpha_select::{auto_alpha, AlphaSelection};
use regcf::baselines::{fit_2scmle, fit_probit, fit_ttsls, probit_vcov};
use regcf::inference::{ape, asf, estimate_vcov, exogeneity_test, wald_test, WaldTest};
use regcf::simlab::{asf_curves, run_builtin, AlphaPolicy, ScenarioConfig};
use regcf::{
    covariance_eigensystem, fit_first_stage, fit_rcmle, fit_rnlse, CovarianceEigensystem, FilterKind, FilterScheme,
    FitOptions, SecondStageFit,
};
use serde::Serialize;

use crate::config::{AlphaSpec, Command, FitEstimator, RunConfig};
use crate::error::CliError;
use crate::ingest::{ingest_csv, IngestedData};

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Convergence {
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Mean log-likelihood (RCMLE, probit, 2SCMLE) or minus half the mean
    /// squared residual (RNLSE); absent for the closed-form TTSLS.
    pub objective: Option<f64>,
}

/// The document written by `fit`.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct FitReport {
    pub estimator: String,
    pub regressors: Vec<String>,
    pub endogenous: Vec<String>,
    pub beta: Vec<f64>,
    pub psi: Vec<f64>,
    /// Standard errors of `(beta, psi)` in that order.
    pub se: Vec<f64>,
    pub wald_exogeneity: Option<WaldTest>,
    pub scheme: Option<String>,
    pub alpha_used: Option<f64>,
    pub convergence: Convergence,
    pub n: usize,
    pub dropped_rows: usize,
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    match path {
        Some(p) => Ok(Box::new(BufWriter::new(File::create(p).map_err(|e| CliError::io(p, e))?))),
        None => Ok(Box::new(std::io::stdout().lock())),
    }
}

fn write_text(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    let mut out = open_output(path)?;
    let label = path.unwrap_or(Path::new("<stdout>"));
    out.write_all(text.as_bytes()).map_err(|e| CliError::io(label, e))?;
    out.flush().map_err(|e| CliError::io(label, e))
}

fn fit_options(cfg: &RunConfig) -> FitOptions {
    let mut opts = FitOptions::default();
    if let Some(m) = cfg.max_iterations {
        opts.max_iterations = m;
    }
    opts
}

fn load_data(cfg: &RunConfig) -> Result<IngestedData, CliError> {
    let path = cfg.data.as_ref().ok_or_else(|| CliError::Config("data is not set".into()))?;
    ingest_csv(path, cfg)
}

fn auto_kind(kind: FilterKind) -> Result<FilterKind, CliError> {
    if kind == FilterKind::Ridge {
        return Err(CliError::Config("automatic alpha selection does not support ridge".into()));
    }
    Ok(kind)
}

/// α from the configuration, selecting it by Mallows Cp when set to `auto`.
fn resolve_alpha(cfg: &RunConfig, data: &IngestedData, eig: &CovarianceEigensystem) -> Result<f64, CliError> {
    match cfg.alpha {
        AlphaSpec::Fixed(a) => Ok(a),
        AlphaSpec::Auto => {
            let sel = auto_alpha(&data.y2, eig, auto_kind(cfg.scheme)?, &data.endog_mask)?;
            info!("selected alpha = {} ({})", sel.alpha, cfg.scheme.name());
            Ok(sel.alpha)
        }
    }
}

fn require_endogenous(data: &IngestedData, estimator: FitEstimator) -> Result<(), CliError> {
    if !data.endog_mask.iter().any(|&e| e) {
        return Err(CliError::Config(format!("{} needs at least one endogenous regressor", estimator.label())));
    }
    Ok(())
}

fn endogenous_names(data: &IngestedData) -> Vec<String> {
    data.regressor_names.iter().zip(&data.endog_mask).filter(|(_, &e)| e).map(|(n, _)| n.clone()).collect()
}

/// A fitted likelihood-type model with its variance and control columns.
struct ModelFit {
    fit: SecondStageFit,
    vcov: DMatrix<f64>,
    control: DMatrix<f64>,
    exogeneity: Option<WaldTest>,
    alpha: Option<f64>,
}

fn fit_model(cfg: &RunConfig, data: &IngestedData, estimator: FitEstimator) -> Result<ModelFit, CliError> {
    let opts = fit_options(cfg);
    match estimator {
        FitEstimator::Rcmle | FitEstimator::Rnlse => {
            require_endogenous(data, estimator)?;
            let eig = covariance_eigensystem(&data.instruments)?;
            let alpha = resolve_alpha(cfg, data, &eig)?;
            let fs = fit_first_stage(&data.y2, &eig, &FilterScheme::new(cfg.scheme, alpha)?, &data.endog_mask)?;
            let fit = if estimator == FitEstimator::Rcmle {
                fit_rcmle(&data.y, &data.y2, &fs, &opts)?
            } else {
                fit_rnlse(&data.y, &data.y2, &fs, &opts)?
            };
            let var = estimate_vcov(&fit, &data.y, &data.y2, &fs, &eig)?;
            let exogeneity = Some(exogeneity_test(&fit, &var)?);
            Ok(ModelFit { fit, vcov: var.vcov_bp, control: fs.v_hat_endog(), exogeneity, alpha: Some(alpha) })
        }
        FitEstimator::TwoScmle => {
            require_endogenous(data, estimator)?;
            let two = fit_2scmle(&data.y, &data.y2, &data.linear_design()?, &data.endog_mask, &opts)?;
            let var = estimate_vcov(&two.second, &data.y, &data.y2, &two.first, &two.eig)?;
            let exogeneity = Some(exogeneity_test(&two.second, &var)?);
            Ok(ModelFit { fit: two.second, vcov: var.vcov_bp, control: two.first.v_hat_endog(), exogeneity, alpha: None })
        }
        FitEstimator::Probit => {
            let fit = fit_probit(&data.y, &data.y2, &opts)?;
            let vcov = probit_vcov(&fit, &data.y, &data.y2)?;
            Ok(ModelFit { fit, vcov, control: DMatrix::zeros(data.n(), 0), exogeneity: None, alpha: None })
        }
        FitEstimator::Ttsls => Err(CliError::Config("TTSLS is linear and has no structural function".into())),
    }
}

fn ttsls_report(cfg: &RunConfig, data: &IngestedData) -> Result<FitReport, CliError> {
    require_endogenous(data, FitEstimator::Ttsls)?;
    let eig = covariance_eigensystem(&data.instruments)?;
    let alpha = resolve_alpha(cfg, data, &eig)?;
    let fs = fit_first_stage(&data.y2, &eig, &FilterScheme::new(cfg.scheme, alpha)?, &data.endog_mask)?;
    let lin = fit_ttsls(&data.y, &data.y2, &fs)?;
    let d_e = data.y2.ncols();
    let d_n = lin.p - d_e;
    let mut r = DMatrix::zeros(d_n, lin.p);
    for k in 0..d_n {
        r[(k, d_e + k)] = 1.0;
    }
    let coef = DVector::from_column_slice(&lin.coefficients);
    let wald = wald_test(&coef, &lin.vcov(), &r, &DVector::zeros(d_n))?;
    Ok(FitReport {
        estimator: FitEstimator::Ttsls.label().into(),
        regressors: data.regressor_names.clone(),
        endogenous: endogenous_names(data),
        beta: lin.coefficients[..d_e].to_vec(),
        psi: lin.coefficients[d_e..].to_vec(),
        se: lin.standard_errors(),
        wald_exogeneity: Some(wald),
        scheme: Some(cfg.scheme.name().into()),
        alpha_used: Some(alpha),
        convergence: Convergence { converged: true, iterations: 0, grad_norm: 0.0, objective: None },
        n: data.n(),
        dropped_rows: data.dropped_rows,
    })
}

/// Fit the configured estimator and build the output document.
pub fn fit_report(cfg: &RunConfig, data: &IngestedData) -> Result<FitReport, CliError> {
    if cfg.estimator == FitEstimator::Ttsls {
        return ttsls_report(cfg, data);
    }
    let m = fit_model(cfg, data, cfg.estimator)?;
    Ok(FitReport {
        estimator: cfg.estimator.label().into(),
        regressors: data.regressor_names.clone(),
        endogenous: endogenous_names(data),
        beta: m.fit.beta_hat.clone(),
        psi: m.fit.psi_hat.clone(),
        se: m.vcov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect(),
        wald_exogeneity: m.exogeneity,
        scheme: cfg.estimator.is_regularized().then(|| cfg.scheme.name().to_string()),
        alpha_used: m.alpha,
        convergence: Convergence {
            converged: m.fit.converged,
            iterations: m.fit.iterations,
            grad_norm: m.fit.grad_norm,
            objective: Some(m.fit.objective),
        },
        n: data.n(),
        dropped_rows: data.dropped_rows,
    })
}

/// Cp curve for the configured scheme.
pub fn alpha_curve(cfg: &RunConfig, data: &IngestedData) -> Result<AlphaSelection, CliError> {
    if !data.endog_mask.iter().any(|&e| e) {
        return Err(CliError::Config("select-alpha needs at least one endogenous regressor".into()));
    }
    let eig = covariance_eigensystem(&data.instruments)?;
    Ok(auto_alpha(&data.y2, &eig, auto_kind(cfg.scheme)?, &data.endog_mask)?)
}

fn write_alpha_curve(sel: &AlphaSelection, out: Box<dyn Write>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["alpha", "cp", "selected"])?;
    for (a, cp) in sel.grid.points.iter().zip(&sel.curve) {
        w.write_record([a.to_string(), cp.to_string(), (*a == sel.alpha).to_string()])?;
    }
    w.flush().map_err(|e| CliError::Data(format!("writing the curve failed: {e}")))
}

/// Quantile with linear interpolation between order statistics.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// ASF and APE of the first endogenous regressor over its 5th–95th percentile
/// range, with the other regressors held at their sample means.
pub fn data_asf(cfg: &RunConfig, data: &IngestedData) -> Result<(Vec<f64>, DVector<f64>, Vec<f64>), CliError> {
    let m = fit_model(cfg, data, cfg.estimator)?;
    let focus = data.endog_mask.iter().position(|&e| e).unwrap_or(0);
    let mut col: Vec<f64> = data.y2.column(focus).iter().copied().collect();
    col.sort_by(f64::total_cmp);
    let (lo, hi) = (quantile(&col, 0.05), quantile(&col, 0.95));
    let grid: Vec<f64> = (0..cfg.points).map(|k| lo + (hi - lo) * k as f64 / (cfg.points - 1) as f64).collect();
    let means: Vec<f64> = (0..data.y2.ncols()).map(|k| data.y2.column(k).mean()).collect();
    let points = DMatrix::from_fn(grid.len(), data.y2.ncols(), |i, k| if k == focus { grid[i] } else { means[k] });
    let values = asf(&m.fit, &m.control, &points)?;
    let effects = ape(&m.fit, &m.control, &points)?;
    Ok((grid, values, effects.column(focus).iter().copied().collect()))
}

fn scenario(cfg: &RunConfig) -> Result<(ScenarioConfig, AlphaPolicy), CliError> {
    let name = cfg.scenario.as_ref().ok_or_else(|| CliError::Config("scenario is not set".into()))?;
    let mut s = ScenarioConfig::named(name).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(reps) = cfg.reps {
        s.reps = reps;
    }
    if let Some(n) = cfg.n {
        s.n = n;
    }
    if let Some(seed) = cfg.seed {
        s.base_seed = seed;
    }
    let policy = match cfg.alpha {
        AlphaSpec::Auto => AlphaPolicy::Auto,
        AlphaSpec::Fixed(a) => AlphaPolicy::Fixed(a),
    };
    Ok((s, policy))
}

fn is_json(path: Option<&Path>) -> bool {
    path.and_then(|p| p.extension()).is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// Run one command end to end, writing its artifact to `cfg.output` or stdout.
pub fn run_command(command: Command, cfg: &RunConfig) -> Result<(), CliError> {
    if let Some(c) = cfg.command {
        if c != command {
            return Err(CliError::Config(format!("config is for '{}', not '{}'", c.name(), command.name())));
        }
    }
    cfg.validate()?;
    if let Some(msg) = cfg.ridge_warning() {
        warn!("{msg}");
    }
    let output = cfg.output.as_deref();
    match command {
        Command::Fit => {
            let data = load_data(cfg)?;
            let report = fit_report(cfg, &data)?;
            let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
            write_text(output, &text)?;
            if !report.convergence.converged {
                return Err(CliError::NotConverged(format!(
                    "{} stopped after {} iterations with gradient norm {:.3e}",
                    report.estimator, report.convergence.iterations, report.convergence.grad_norm
                )));
            }
            Ok(())
        }
        Command::SelectAlpha => {
            let data = load_data(cfg)?;
            let sel = alpha_curve(cfg, &data)?;
            info!("alpha* = {}", sel.alpha);
            write_alpha_curve(&sel, open_output(output)?)
        }
        Command::Simulate => {
            let (s, policy) = scenario(cfg)?;
            let report = run_builtin(&s, &cfg.estimators, policy)?;
            if is_json(output) {
                write_text(output, &(report.to_json()? + "\n"))
            } else {
                report.write_csv(open_output(output)?).map_err(CliError::from)
            }
        }
        Command::Asf => {
            if cfg.scenario.is_some() {
                let (s, policy) = scenario(cfg)?;
                let curves = asf_curves(&s, &cfg.estimators, policy, cfg.points)?;
                curves.write_csv(open_output(output)?).map_err(CliError::from)
            } else {
                let data = load_data(cfg)?;
                let (grid, values, effects) = data_asf(cfg, &data)?;
                let mut w = csv::Writer::from_writer(open_output(output)?);
                w.write_record(["y2", "asf", "ape"])?;
                for k in 0..grid.len() {
                    w.write_record([grid[k].to_string(), values[k].to_string(), effects[k].to_string()])?;
                }
                w.flush().map_err(|e| CliError::Data(format!("writing the curve failed: {e}")))
            }
        }
    }
}
