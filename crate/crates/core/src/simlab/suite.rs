//! Estimators run inside each Monte Carlo replication.

use std::cell::OnceCell;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::alpha_select::{auto_alpha, AlphaSelection};
use crate::baselines::{fit_2scmle, fit_probit, fit_ttsls, probit_vcov};
use crate::error::{Error, Result};
use crate::first_stage::{fit_first_stage, FirstStageFit};
use crate::hilbert::{covariance_eigensystem, CovarianceEigensystem, FilterKind, FilterScheme, InstrumentSample};
use crate::inference::{coefficient_test, estimate_vcov};
use crate::normal;
use crate::second_stage::{fit_rcmle, fit_rnlse, FitOptions, SecondStageFit};

use super::designs::Dataset;

/// Two-sided 5% critical value of `χ²(1)`.
pub fn critical_value() -> f64 {
    normal::chi2_quantile(0.95, 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaPolicy {
    Fixed(f64),
    Auto,
}

/// Shared per-replication state: centered instruments, eigensystem and selected α.
pub struct ReplicationContext<'a> {
    pub data: &'a Dataset,
    pub policy: AlphaPolicy,
    pub opts: FitOptions,
    centered: OnceCell<Result<InstrumentSample>>,
    eig: OnceCell<Result<CovarianceEigensystem>>,
    tikhonov: OnceCell<Result<AlphaSelection>>,
    cutoff: OnceCell<Result<AlphaSelection>>,
}

impl<'a> ReplicationContext<'a> {
    pub fn new(data: &'a Dataset, policy: AlphaPolicy) -> Self {
        ReplicationContext {
            data,
            policy,
            opts: FitOptions::default(),
            centered: OnceCell::new(),
            eig: OnceCell::new(),
            tikhonov: OnceCell::new(),
            cutoff: OnceCell::new(),
        }
    }

    pub fn eigensystem(&self) -> Result<&CovarianceEigensystem> {
        let centered = self.centered.get_or_init(|| self.data.instruments.center());
        let centered = centered.as_ref().map_err(Clone::clone)?;
        self.eig.get_or_init(|| covariance_eigensystem(centered)).as_ref().map_err(Clone::clone)
    }

    pub fn selection(&self, kind: FilterKind) -> Result<&AlphaSelection> {
        let cell = match kind {
            FilterKind::Tikhonov => &self.tikhonov,
            FilterKind::SpectralCutoff => &self.cutoff,
            FilterKind::Ridge => {
                return Err(Error::InvalidParameter("automatic regularization does not support ridge".into()))
            }
        };
        let eig = self.eigensystem()?;
        cell.get_or_init(|| auto_alpha(&self.data.y2, eig, kind, &self.data.endog_mask)).as_ref().map_err(Clone::clone)
    }

    pub fn alpha(&self, kind: FilterKind) -> Result<f64> {
        match self.policy {
            AlphaPolicy::Fixed(alpha) => Ok(alpha),
            AlphaPolicy::Auto => Ok(self.selection(kind)?.alpha),
        }
    }

    pub fn first_stage(&self, kind: FilterKind) -> Result<FirstStageFit> {
        let scheme = FilterScheme::new(kind, self.alpha(kind)?)?;
        fit_first_stage(&self.data.y2, self.eigensystem()?, &scheme, &self.data.endog_mask)
    }
}

/// Outcome of one estimator on one replication.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub beta1: f64,
    pub se: f64,
    /// Value `β̂₁` is compared with.
    pub target: f64,
    /// Fitted model and its control columns, for ASF evaluation.
    pub model: Option<(SecondStageFit, DMatrix<f64>)>,
}

impl Estimate {
    pub fn rejects(&self) -> bool {
        let t = (self.beta1 - self.target) / self.se;
        t * t > critical_value()
    }
}

pub trait McEstimator: Send + Sync {
    fn name(&self) -> String;
    fn estimate(&self, ctx: &ReplicationContext) -> Result<Estimate>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BuiltinEstimator {
    #[serde(rename = "TRCMLE")]
    Trcmle,
    #[serde(rename = "SCRCMLE")]
    Scrcmle,
    #[serde(rename = "TRNLSE")]
    Trnlse,
    #[serde(rename = "SCRNLSE")]
    Scrnlse,
    #[serde(rename = "Inf.2SCMLE")]
    Inf2scmle,
    #[serde(rename = "2SCMLE")]
    TwoScmle,
    Probit,
    #[serde(rename = "TTSLS")]
    Ttsls,
}

impl BuiltinEstimator {
    pub const ALL: [BuiltinEstimator; 8] = [
        BuiltinEstimator::Trcmle,
        BuiltinEstimator::Scrcmle,
        BuiltinEstimator::Trnlse,
        BuiltinEstimator::Scrnlse,
        BuiltinEstimator::Inf2scmle,
        BuiltinEstimator::TwoScmle,
        BuiltinEstimator::Probit,
        BuiltinEstimator::Ttsls,
    ];

    pub fn label(self) -> &'static str {
        match self {
            BuiltinEstimator::Trcmle => "TRCMLE",
            BuiltinEstimator::Scrcmle => "SCRCMLE",
            BuiltinEstimator::Trnlse => "TRNLSE",
            BuiltinEstimator::Scrnlse => "SCRNLSE",
            BuiltinEstimator::Inf2scmle => "Inf.2SCMLE",
            BuiltinEstimator::TwoScmle => "2SCMLE",
            BuiltinEstimator::Probit => "Probit",
            BuiltinEstimator::Ttsls => "TTSLS",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.label().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::InvalidParameter(format!("unknown estimator '{name}'")))
    }

    /// The table layout: two regularized estimators and four comparisons.
    pub fn table_suite() -> Vec<BuiltinEstimator> {
        vec![
            BuiltinEstimator::Trcmle,
            BuiltinEstimator::Scrcmle,
            BuiltinEstimator::Inf2scmle,
            BuiltinEstimator::TwoScmle,
            BuiltinEstimator::Probit,
            BuiltinEstimator::Ttsls,
        ]
    }
}

fn control_function_estimate(
    ctx: &ReplicationContext,
    kind: FilterKind,
    nls: bool,
) -> Result<Estimate> {
    let data = ctx.data;
    let fs = ctx.first_stage(kind)?;
    let fit = if nls {
        fit_rnlse(&data.y, &data.y2, &fs, &ctx.opts)?
    } else {
        fit_rcmle(&data.y, &data.y2, &fs, &ctx.opts)?
    };
    let var = estimate_vcov(&fit, &data.y, &data.y2, &fs, ctx.eigensystem()?)?;
    finish(fit, var.vcov_bp, fs.v_hat_endog(), data.truth.beta[0])
}

fn finish(fit: SecondStageFit, vcov: DMatrix<f64>, control: DMatrix<f64>, target: f64) -> Result<Estimate> {
    if !fit.converged {
        return Err(Error::Separation { iterations: fit.iterations, detail: "iteration limit reached".into() });
    }
    let se = vcov[(0, 0)].max(0.0).sqrt();
    if !(se > 0.0) || !se.is_finite() {
        return Err(Error::NearSingular { condition: f64::INFINITY });
    }
    // Checks that the variance is usable for a Wald test.
    coefficient_test(&fit.coefficients(), &vcov, 0, target)?;
    Ok(Estimate { beta1: fit.beta_hat[0], se, target, model: Some((fit, control)) })
}

fn two_step(ctx: &ReplicationContext, design: &DMatrix<f64>) -> Result<Estimate> {
    let data = ctx.data;
    let two = fit_2scmle(&data.y, &data.y2, design, &data.endog_mask, &ctx.opts)?;
    let var = estimate_vcov(&two.second, &data.y, &data.y2, &two.first, &two.eig)?;
    finish(two.second, var.vcov_bp, two.first.v_hat_endog(), data.truth.beta[0])
}

impl McEstimator for BuiltinEstimator {
    fn name(&self) -> String {
        self.label().to_string()
    }

    fn estimate(&self, ctx: &ReplicationContext) -> Result<Estimate> {
        let data = ctx.data;
        match self {
            BuiltinEstimator::Trcmle => control_function_estimate(ctx, FilterKind::Tikhonov, false),
            BuiltinEstimator::Scrcmle => control_function_estimate(ctx, FilterKind::SpectralCutoff, false),
            BuiltinEstimator::Trnlse => control_function_estimate(ctx, FilterKind::Tikhonov, true),
            BuiltinEstimator::Scrnlse => control_function_estimate(ctx, FilterKind::SpectralCutoff, true),
            BuiltinEstimator::Inf2scmle => two_step(ctx, &data.infeasible_design),
            BuiltinEstimator::TwoScmle => match &data.linear_design {
                Some(design) => two_step(ctx, design),
                None => Err(Error::InvalidParameter("2SCMLE needs a finite instrument design".into())),
            },
            BuiltinEstimator::Probit => {
                let fit = fit_probit(&data.y, &data.y2, &ctx.opts)?;
                let vcov = probit_vcov(&fit, &data.y, &data.y2)?;
                finish(fit, vcov, DMatrix::zeros(data.y.len(), 0), data.truth.beta[0])
            }
            BuiltinEstimator::Ttsls => {
                let fs = ctx.first_stage(FilterKind::Tikhonov)?;
                let lin = fit_ttsls(&data.y, &data.y2, &fs)?;
                let se = lin.standard_errors()[0];
                if !(se > 0.0) {
                    return Err(Error::NearSingular { condition: f64::INFINITY });
                }
                Ok(Estimate { beta1: lin.coefficients[0], se, target: data.truth.ttsls_target, model: None })
            }
        }
    }
}

/// Estimator with a constant output, for harness checks.
pub struct ConstantEstimator {
    pub value: f64,
    pub se: f64,
}

impl McEstimator for ConstantEstimator {
    fn name(&self) -> String {
        "Constant".into()
    }

    fn estimate(&self, ctx: &ReplicationContext) -> Result<Estimate> {
        Ok(Estimate { beta1: self.value, se: self.se, target: ctx.data.truth.beta[0], model: None })
    }
}

/// ASF of a fitted model on `(y₂, z₁ = 0)` points.
pub fn model_asf(model: &(SecondStageFit, DMatrix<f64>), y2_points: &[f64]) -> Result<DVector<f64>> {
    let (fit, control) = model;
    let d_e = fit.beta_hat.len();
    let pts = DMatrix::from_fn(y2_points.len(), d_e, |i, j| if j == 0 { y2_points[i] } else { 0.0 });
    crate::inference::asf(fit, control, &pts)
}
