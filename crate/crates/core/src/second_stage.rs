//! Second stage: conditional probit maximum likelihood (RCMLE) and nonlinear
//! least squares (RNLSE) in the regressors `(Y_2, V̂_endog)`.
//!
//! The fit is reported as `(β̂, ψ̂)`. The equivalent coordinates
//! `θ = (β, β_endog + ψ)` on `(γ̂, V̂_endog)` are available through
//! [`SecondStageFit::paper_theta`] and [`parametrization_map`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::first_stage::FirstStageFit;
use crate::linalg::{condition_number, hstack, MAX_CONDITION};
use crate::normal::{self, TAIL_GUARD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "RCMLE")]
    Rcmle,
    #[serde(rename = "RNLSE")]
    Rnlse,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Rcmle => "RCMLE",
            EstimatorKind::Rnlse => "RNLSE",
        }
    }
}

/// Value, score and curvature of a sample-mean objective.
#[derive(Debug, Clone)]
pub struct Objective {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// Per-observation derivatives of the probit log-likelihood with respect to the index.
#[inline]
pub(crate) fn probit_terms(index: f64, y: f64) -> (f64, f64, f64) {
    let mut value = 0.0;
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    if y > 0.0 {
        let lam = normal::mills(index);
        value += y * normal::ln_cdf(index);
        d1 += y * lam;
        d2 -= y * lam * normal::x_plus_mills(index);
    }
    if y < 1.0 {
        let lam = normal::mills(-index);
        value += (1.0 - y) * normal::ln_cdf(-index);
        d1 -= (1.0 - y) * lam;
        d2 -= (1.0 - y) * lam * normal::x_plus_mills(-index);
    }
    (value, d1, d2)
}

/// Mean probit log-likelihood `n⁻¹ Σ y log Φ(x'θ) + (1-y) log(1-Φ(x'θ))`
/// with its analytic gradient and Hessian.
pub fn probit_objective(theta: &DVector<f64>, x: &DMatrix<f64>, y: &DVector<f64>) -> Objective {
    let n = x.nrows();
    let p = x.ncols();
    let index = x * theta;
    let mut value = 0.0;
    let mut gradient = DVector::zeros(p);
    let mut hessian = DMatrix::zeros(p, p);
    for i in 0..n {
        let (v, d1, d2) = probit_terms(index[i], y[i]);
        value += v;
        let xi = x.row(i).transpose();
        gradient.axpy(d1, &xi, 1.0);
        hessian.ger(d2, &xi, &xi, 1.0);
    }
    let nf = n as f64;
    Objective { value: value / nf, gradient: gradient / nf, hessian: hessian / nf }
}

/// Nonlinear least-squares objective with both the exact Hessian and the
/// Gauss–Newton approximation `-n⁻¹ Σ φ² x x'`.
#[derive(Debug, Clone)]
pub struct NlsObjective {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
    pub gauss_newton: DMatrix<f64>,
}

/// Mean of `-½ (y - Φ(x'θ))²`.
pub fn nls_objective(theta: &DVector<f64>, x: &DMatrix<f64>, y: &DVector<f64>) -> NlsObjective {
    let n = x.nrows();
    let p = x.ncols();
    let index = x * theta;
    let mut value = 0.0;
    let mut gradient = DVector::zeros(p);
    let mut hessian = DMatrix::zeros(p, p);
    let mut gauss_newton = DMatrix::zeros(p, p);
    for i in 0..n {
        let eta = index[i];
        let phi = normal::pdf(eta);
        let r = y[i] - normal::cdf(eta);
        value -= 0.5 * r * r;
        let xi = x.row(i).transpose();
        gradient.axpy(r * phi, &xi, 1.0);
        hessian.ger(-phi * phi - r * eta * phi, &xi, &xi, 1.0);
        gauss_newton.ger(-phi * phi, &xi, &xi, 1.0);
    }
    let nf = n as f64;
    NlsObjective { value: value / nf, gradient: gradient / nf, hessian: hessian / nf, gauss_newton: gauss_newton / nf }
}

/// Iteration controls for the Newton / Gauss–Newton engine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_iterations: usize,
    pub max_halvings: usize,
    pub grad_tol: f64,
    pub objective_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { max_iterations: 100, max_halvings: 30, grad_tol: 1e-8, objective_tol: 1e-12 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SecondStageFit {
    pub beta_hat: Vec<f64>,
    pub psi_hat: Vec<f64>,
    /// Mean log-likelihood (RCMLE) or mean of `-½` squared residuals (RNLSE).
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    pub estimator_kind: EstimatorKind,
    /// Which regressors carry a control-function coefficient.
    pub endog_mask: Vec<bool>,
}

impl SecondStageFit {
    /// `(β̂, ψ̂)` stacked.
    pub fn coefficients(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.beta_hat.len() + self.psi_hat.len(),
            self.beta_hat.iter().chain(self.psi_hat.iter()).copied(),
        )
    }

    pub fn endogenous_columns(&self) -> Vec<usize> {
        self.endog_mask.iter().enumerate().filter(|(_, &e)| e).map(|(k, _)| k).collect()
    }

    /// `θ = (β̂, β̂_endog + ψ̂)`, the coefficients on `(γ̂, V̂_endog)`.
    pub fn paper_theta(&self) -> DVector<f64> {
        parametrization_map(&self.endog_mask) * self.coefficients()
    }
}

/// Matrix `T` with `θ = T (β, ψ)`: identity on `β`, and `β_endog + ψ` below.
pub fn parametrization_map(endog_mask: &[bool]) -> DMatrix<f64> {
    let d_e = endog_mask.len();
    let endog: Vec<usize> = endog_mask.iter().enumerate().filter(|(_, &e)| e).map(|(k, _)| k).collect();
    let p = d_e + endog.len();
    let mut t = DMatrix::identity(p, p);
    for (k, &col) in endog.iter().enumerate() {
        t[(d_e + k, col)] = 1.0;
    }
    t
}

/// Second-stage design `[Y_2, V̂_endog]`.
pub fn control_function_design(y2: &DMatrix<f64>, fs: &FirstStageFit) -> Result<DMatrix<f64>> {
    if y2.shape() != fs.gamma_hat.shape() {
        return Err(Error::DimensionMismatch { expected: fs.gamma_hat.ncols(), got: y2.ncols() });
    }
    Ok(hstack(y2, &fs.v_hat_endog()))
}

#[derive(Debug)]
pub(crate) struct EngineFit {
    pub theta: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
}

pub(crate) fn check_outcome(y: &DVector<f64>, binary: bool) -> Result<()> {
    if y.is_empty() {
        return Err(Error::DegenerateSample("empty outcome".into()));
    }
    if binary && y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidParameter("outcome must be binary (0/1)".into()));
    }
    let first = y[0];
    if y.iter().all(|&v| v == first) {
        return Err(Error::DegenerateOutcome(first));
    }
    Ok(())
}

pub(crate) fn check_design(x: &DMatrix<f64>) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("design contains non-finite values".into()));
    }
    let condition = condition_number(&(x.transpose() * x));
    if !(condition <= MAX_CONDITION) {
        return Err(Error::Collinearity { condition });
    }
    Ok(())
}

fn evaluate(kind: EstimatorKind, theta: &DVector<f64>, x: &DMatrix<f64>, y: &DVector<f64>) -> Objective {
    match kind {
        EstimatorKind::Rcmle => probit_objective(theta, x, y),
        EstimatorKind::Rnlse => {
            let o = nls_objective(theta, x, y);
            Objective { value: o.value, gradient: o.gradient, hessian: o.gauss_newton }
        }
    }
}

fn ascent_direction(obj: &Objective) -> DVector<f64> {
    let neg = -&obj.hessian;
    if let Some(chol) = neg.clone().cholesky() {
        return chol.solve(&obj.gradient);
    }
    // Curvature lost (saturated probabilities): damp toward a gradient step.
    let scale = neg.diagonal().abs().max().max(1e-300);
    let mut damped = neg;
    for k in 0..damped.nrows() {
        damped[(k, k)] += 1e-6 * scale;
    }
    match damped.cholesky() {
        Some(chol) => chol.solve(&obj.gradient),
        None => obj.gradient.clone(),
    }
}

/// Newton (RCMLE) or Gauss–Newton (RNLSE) ascent with step halving.
pub(crate) fn maximize(
    kind: EstimatorKind,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    start: DVector<f64>,
    opts: &FitOptions,
) -> Result<EngineFit> {
    let mut theta = start;
    let mut obj = evaluate(kind, &theta, x, y);
    let mut iterations = 0;
    let mut converged = false;
    let mut stalls = 0;

    loop {
        let grad_norm = obj.gradient.norm();
        if grad_norm < opts.grad_tol * obj.value.abs().max(1.0) {
            converged = true;
            break;
        }
        if iterations >= opts.max_iterations {
            break;
        }
        let index = x * &theta;
        if index.iter().all(|v| v.abs() > TAIL_GUARD) {
            return Err(Error::Separation {
                iterations,
                detail: format!("every |index| exceeds {TAIL_GUARD} with gradient norm {grad_norm:.3e}"),
            });
        }

        let direction = ascent_direction(&obj);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let candidate = &theta + &direction * step;
            let cand_obj = evaluate(kind, &candidate, x, y);
            if cand_obj.value.is_finite() && cand_obj.value >= obj.value {
                accepted = Some((candidate, cand_obj));
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        let Some((candidate, cand_obj)) = accepted else {
            break;
        };
        let change = cand_obj.value - obj.value;
        theta = candidate;
        obj = cand_obj;
        if change < opts.objective_tol {
            stalls += 1;
            // Newton keeps shrinking the gradient after the objective has
            // flattened; give up only once the steps stop paying off.
            if stalls >= 5 {
                break;
            }
        } else {
            stalls = 0;
        }
    }

    let grad_norm = obj.gradient.norm();
    if !converged {
        converged = grad_norm < opts.grad_tol * obj.value.abs().max(1.0);
    }
    let index = x * &theta;
    let binary = y.iter().all(|&v| v == 0.0 || v == 1.0);
    if binary && index.iter().zip(y.iter()).all(|(&eta, &yi)| (2.0 * yi - 1.0) * eta > 0.0) {
        let max_abs = index.amax();
        return Err(Error::Separation {
            iterations,
            detail: format!("the fitted index classifies every observation correctly (max |index| = {max_abs:.3e})"),
        });
    }
    Ok(EngineFit { theta, objective: obj.value, iterations, converged, grad_norm })
}

/// Probit on `x` alone, starting from zero; used for starting values.
pub(crate) fn naive_probit(x: &DMatrix<f64>, y: &DVector<f64>, opts: &FitOptions) -> Result<EngineFit> {
    maximize(EstimatorKind::Rcmle, x, y, DVector::zeros(x.ncols()), opts)
}

fn fit_control_function(
    kind: EstimatorKind,
    y: &DVector<f64>,
    y2: &DMatrix<f64>,
    fs: &FirstStageFit,
    opts: &FitOptions,
) -> Result<SecondStageFit> {
    if y.len() != y2.nrows() {
        return Err(Error::DimensionMismatch { expected: y2.nrows(), got: y.len() });
    }
    check_outcome(y, true)?;
    let x = control_function_design(y2, fs)?;
    check_design(&x)?;

    let d_e = y2.ncols();
    let p = x.ncols();
    let mut start = DVector::zeros(p);
    if let Ok(naive) = naive_probit(y2, y, opts) {
        start.rows_mut(0, d_e).copy_from(&naive.theta);
    }
    let fit = maximize(kind, &x, y, start, opts)?;
    Ok(SecondStageFit {
        beta_hat: fit.theta.rows(0, d_e).iter().copied().collect(),
        psi_hat: fit.theta.rows(d_e, p - d_e).iter().copied().collect(),
        objective: fit.objective,
        iterations: fit.iterations,
        converged: fit.converged,
        grad_norm: fit.grad_norm,
        estimator_kind: kind,
        endog_mask: fs.endog_mask.clone(),
    })
}

/// Regularized conditional maximum likelihood.
pub fn fit_rcmle(y: &DVector<f64>, y2: &DMatrix<f64>, fs: &FirstStageFit, opts: &FitOptions) -> Result<SecondStageFit> {
    fit_control_function(EstimatorKind::Rcmle, y, y2, fs, opts)
}

/// Regularized nonlinear least squares.
pub fn fit_rnlse(y: &DVector<f64>, y2: &DMatrix<f64>, fs: &FirstStageFit, opts: &FitOptions) -> Result<SecondStageFit> {
    fit_control_function(EstimatorKind::Rnlse, y, y2, fs, opts)
}
