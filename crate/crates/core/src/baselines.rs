//! Comparison estimators: naive probit, the two-step control-function probit
//! with an OLS first stage (2SCMLE), and the regularized linear probability
//! model with a control function (TTSLS).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::first_stage::{fit_first_stage, FirstStageFit};
use crate::hilbert::{covariance_eigensystem, CovarianceEigensystem, FilterScheme, InstrumentSample, InstrumentSpace};
use crate::linalg::{hstack, ols_vec, spd_inverse, symmetrize};
use crate::second_stage::{
    check_design, check_outcome, fit_rcmle, maximize, probit_objective, EstimatorKind, FitOptions, SecondStageFit,
};

/// Probit of `y` on `x` without a control function.
pub fn fit_probit(y: &DVector<f64>, x: &DMatrix<f64>, opts: &FitOptions) -> Result<SecondStageFit> {
    if y.len() != x.nrows() {
        return Err(Error::DimensionMismatch { expected: x.nrows(), got: y.len() });
    }
    check_outcome(y, true)?;
    check_design(x)?;
    let fit = maximize(EstimatorKind::Rcmle, x, y, DVector::zeros(x.ncols()), opts)?;
    Ok(SecondStageFit {
        beta_hat: fit.theta.iter().copied().collect(),
        psi_hat: Vec::new(),
        objective: fit.objective,
        iterations: fit.iterations,
        converged: fit.converged,
        grad_norm: fit.grad_norm,
        estimator_kind: EstimatorKind::Rcmle,
        endog_mask: vec![false; x.ncols()],
    })
}

/// Inverse information `(-H)⁻¹ / n` for a probit fit.
pub fn probit_vcov(fit: &SecondStageFit, y: &DVector<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let theta = DVector::from_column_slice(&fit.beta_hat);
    let obj = probit_objective(&theta, x, y);
    let info = spd_inverse(&(-obj.hessian))?;
    Ok(info / x.nrows() as f64)
}

/// Two-step fit with its first stage and instrument eigensystem, ready for
/// [`crate::inference::estimate_vcov`].
#[derive(Debug, Clone)]
pub struct TwoStepFit {
    pub second: SecondStageFit,
    pub first: FirstStageFit,
    pub eig: CovarianceEigensystem,
}

/// OLS first stage on the centered design, then probit on `(Y₂, V̂)`.
///
/// The first stage is the spectral cut-off filter that keeps every retained
/// component, which is the projection onto the column space of the design.
pub fn fit_2scmle(
    y: &DVector<f64>,
    y2: &DMatrix<f64>,
    z_design: &DMatrix<f64>,
    endog_mask: &[bool],
    opts: &FitOptions,
) -> Result<TwoStepFit> {
    let (n, d_z) = z_design.shape();
    if d_z == 0 || d_z >= n {
        return Err(Error::InvalidParameter(format!("2SCMLE needs 1 <= d_z < n (d_z = {d_z}, n = {n})")));
    }
    let sample = InstrumentSample::new(z_design.clone(), InstrumentSpace::euclidean(d_z)?)?.center()?;
    let eig = covariance_eigensystem(&sample)?;
    if eig.rank() < d_z {
        return Err(Error::Collinearity { condition: f64::INFINITY });
    }
    let smallest = eig.eigenvalues[eig.rank() - 1];
    let scheme = FilterScheme::spectral_cutoff(smallest * smallest)?;
    let first = fit_first_stage(y2, &eig, &scheme, endog_mask)?;
    let second = fit_rcmle(y, y2, &first, opts)?;
    Ok(TwoStepFit { second, first, eig })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearFit {
    pub coefficients: Vec<f64>,
    pub residuals: Vec<f64>,
    pub vcov_hc1: Vec<Vec<f64>>,
    pub n: usize,
    pub p: usize,
}

impl LinearFit {
    pub fn vcov(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.p, self.p, |i, j| self.vcov_hc1[i][j])
    }

    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.p).map(|k| self.vcov_hc1[k][k].max(0.0).sqrt()).collect()
    }
}

/// OLS with the HC1 covariance `n/(n-p) (X'X)⁻¹ X' diag(e²) X (X'X)⁻¹`.
pub fn ols_hc1(y: &DVector<f64>, x: &DMatrix<f64>) -> Result<LinearFit> {
    let (n, p) = x.shape();
    if n <= p {
        return Err(Error::DegenerateSample(format!("HC1 needs n > p (n = {n}, p = {p})")));
    }
    let b = ols_vec(x, y)?;
    let e = y - x * &b;
    let xtx_inv = spd_inverse(&(x.transpose() * x))?;
    let mut meat = DMatrix::zeros(p, p);
    for i in 0..n {
        let xi = x.row(i).transpose();
        meat.ger(e[i] * e[i], &xi, &xi, 1.0);
    }
    let scale = n as f64 / (n - p) as f64;
    let v = symmetrize(&(&xtx_inv * meat * &xtx_inv * scale));
    Ok(LinearFit {
        coefficients: b.iter().copied().collect(),
        residuals: e.iter().copied().collect(),
        vcov_hc1: (0..p).map(|i| (0..p).map(|j| v[(i, j)]).collect()).collect(),
        n,
        p,
    })
}

/// Linear probability model of `y` on `(Y₂, V̂_endog)`.
pub fn fit_ttsls(y: &DVector<f64>, y2: &DMatrix<f64>, fs: &FirstStageFit) -> Result<LinearFit> {
    if y.len() != y2.nrows() || fs.n() != y2.nrows() {
        return Err(Error::DimensionMismatch { expected: y2.nrows(), got: y.len() });
    }
    ols_hc1(y, &hstack(y2, &fs.v_hat_endog()))
}
