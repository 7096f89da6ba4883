//! Sandwich variance with the first-stage correction, Wald and exogeneity
//! tests, average structural function and average partial effects.
//!
//! The variance is assembled in the coordinates `ĝ = (γ̂, V̂_endog)` with
//! `θ = (β, β_endog + ψ)`, then mapped back to `(β̂, ψ̂)`. The generated
//! regressor term is computed entirely from the retained spectrum.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::first_stage::FirstStageFit;
use crate::hilbert::CovarianceEigensystem;
use crate::linalg::{hstack, spd_inverse, symmetrize};
use crate::normal;
use crate::second_stage::{parametrization_map, probit_terms, EstimatorKind, SecondStageFit};

#[derive(Debug, Clone)]
pub struct VarianceEstimate {
    /// `Γ̂⁻¹ (Ĵ₁ + Ĵ₂) Γ̂⁻¹` in the `(γ̂, V̂_endog)` coordinates.
    pub w_hat: DMatrix<f64>,
    /// Covariance of `(β̂, ψ̂)`, already divided by `n`.
    pub vcov_bp: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub j1: DMatrix<f64>,
    pub j2: DMatrix<f64>,
    pub sigma2: f64,
    /// `T` with `θ = T (β, ψ)`.
    pub transform: DMatrix<f64>,
    pub n: usize,
}

impl VarianceEstimate {
    pub fn standard_errors(&self) -> Vec<f64> {
        self.vcov_bp.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }

    /// `Ŵ / n`.
    pub fn vcov_paper(&self) -> DMatrix<f64> {
        &self.w_hat / self.n as f64
    }

    /// Sandwich without the first-stage correction, `Γ̂⁻¹ Ĵ₁ Γ̂⁻¹`.
    pub fn plain_sandwich(&self) -> Result<DMatrix<f64>> {
        let gi = spd_inverse(&self.gamma)?;
        Ok(symmetrize(&(&gi * &self.j1 * &gi)))
    }
}

/// Per-observation curvature weight `ṁ₂` and squared score weight `m₁²`.
fn weights(kind: EstimatorKind, index: f64, y: f64) -> (f64, f64) {
    match kind {
        EstimatorKind::Rcmle => {
            let (_, d1, _) = probit_terms(index, y);
            (d1 * d1, d1 * d1)
        }
        EstimatorKind::Rnlse => {
            let phi = normal::pdf(index);
            let r = y - normal::cdf(index);
            (phi * phi, r * r * phi * phi)
        }
    }
}

/// Feasible sandwich variance for a control-function fit.
pub fn estimate_vcov(
    fit: &SecondStageFit,
    y: &DVector<f64>,
    y2: &DMatrix<f64>,
    fs: &FirstStageFit,
    eig: &CovarianceEigensystem,
) -> Result<VarianceEstimate> {
    let (n, d_e) = y2.shape();
    if y.len() != n || fs.n() != n || eig.n() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y.len() });
    }
    if fit.beta_hat.len() != d_e || fit.endog_mask != fs.endog_mask {
        return Err(Error::DimensionMismatch { expected: d_e, got: fit.beta_hat.len() });
    }
    let v_endog = fs.v_hat_endog();
    let g = hstack(&fs.gamma_hat, &v_endog);
    let p = g.ncols();
    let index = hstack(y2, &v_endog) * fit.coefficients();
    let nf = n as f64;

    let mut m2 = DVector::zeros(n);
    let mut gamma = DMatrix::zeros(p, p);
    let mut j1 = DMatrix::zeros(p, p);
    for i in 0..n {
        let (w2, w1) = weights(fit.estimator_kind, index[i], y[i]);
        m2[i] = w2;
        let gi = g.row(i).transpose();
        gamma.ger(w2 / nf, &gi, &gi, 1.0);
        j1.ger(w1 / nf, &gi, &gi, 1.0);
    }

    let psi = DVector::from_column_slice(&fit.psi_hat);
    let cf = &v_endog * &psi;
    let sigma2 = cf.norm_squared() / nf;

    // A_j = n⁻¹ Σ ṁ₂ s_ij ĝ_i; Ĵ₂ = σ̂² Σ_j (q_j²/κ_j) A_j A_j'.
    let mut weighted = g.clone();
    for i in 0..n {
        weighted.row_mut(i).scale_mut(m2[i] / nf);
    }
    let a = weighted.transpose() * &eig.dual_scores;
    let mut j2 = DMatrix::zeros(p, p);
    if sigma2 > 0.0 {
        for j in 0..eig.rank() {
            let q = fs.q_values[j];
            if q == 0.0 {
                continue;
            }
            let aj = a.column(j);
            j2.ger(sigma2 * q * q / eig.eigenvalues[j], &aj, &aj, 1.0);
        }
    }
    let j2 = symmetrize(&j2);
    let gamma = symmetrize(&gamma);
    let j1 = symmetrize(&j1);

    let gi = spd_inverse(&gamma)?;
    let w_hat = symmetrize(&(&gi * (&j1 + &j2) * &gi));
    let transform = parametrization_map(&fit.endog_mask);
    let t_inv = transform.clone().try_inverse().expect("unit lower triangular");
    let vcov_bp = symmetrize(&(&t_inv * (&w_hat / nf) * t_inv.transpose()));
    Ok(VarianceEstimate { w_hat, vcov_bp, gamma, j1, j2, sigma2, transform, n })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub stat: f64,
    pub df: usize,
    pub p: f64,
}

/// `(Rθ̂ − r)' [R V R']⁻¹ (Rθ̂ − r)` against `χ²(q)`.
pub fn wald_test(
    estimate: &DVector<f64>,
    vcov: &DMatrix<f64>,
    restriction: &DMatrix<f64>,
    value: &DVector<f64>,
) -> Result<WaldTest> {
    let (q, p) = restriction.shape();
    if p != estimate.len() || vcov.shape() != (p, p) {
        return Err(Error::DimensionMismatch { expected: estimate.len(), got: p });
    }
    if value.len() != q || q == 0 {
        return Err(Error::DimensionMismatch { expected: q, got: value.len() });
    }
    let diff = restriction * estimate - value;
    let middle = restriction * vcov * restriction.transpose();
    let inv = spd_inverse(&middle)?;
    let stat = (diff.transpose() * inv * &diff)[(0, 0)].max(0.0);
    Ok(WaldTest { stat, df: q, p: normal::chi2_sf(stat, q) })
}

/// Wald test of `β_k = value` for one coefficient of `(β̂, ψ̂)`.
pub fn coefficient_test(estimate: &DVector<f64>, vcov: &DMatrix<f64>, k: usize, value: f64) -> Result<WaldTest> {
    let mut r = DMatrix::zeros(1, estimate.len());
    r[(0, k)] = 1.0;
    wald_test(estimate, vcov, &r, &DVector::from_element(1, value))
}

/// Joint test of `ψ = 0`.
pub fn exogeneity_test(fit: &SecondStageFit, var: &VarianceEstimate) -> Result<WaldTest> {
    let d_e = fit.beta_hat.len();
    let d_n = fit.psi_hat.len();
    if d_n == 0 {
        return Err(Error::InvalidParameter("fit has no control-function coefficients".into()));
    }
    let mut r = DMatrix::zeros(d_n, d_e + d_n);
    for k in 0..d_n {
        r[(k, d_e + k)] = 1.0;
    }
    wald_test(&fit.coefficients(), &var.vcov_bp, &r, &DVector::zeros(d_n))
}

fn check_points(fit: &SecondStageFit, control: &DMatrix<f64>, points: &DMatrix<f64>) -> Result<()> {
    if points.ncols() != fit.beta_hat.len() {
        return Err(Error::DimensionMismatch { expected: fit.beta_hat.len(), got: points.ncols() });
    }
    if control.ncols() != fit.psi_hat.len() {
        return Err(Error::DimensionMismatch { expected: fit.psi_hat.len(), got: control.ncols() });
    }
    Ok(())
}

/// `ASF(y₂) = n⁻¹ Σ_i Φ(y₂'β̂ + V̂_i'ψ̂)` at each row of `points`.
///
/// `control` holds the residuals `V̂_endog` (`n × d_endog`, possibly zero columns).
pub fn asf(fit: &SecondStageFit, control: &DMatrix<f64>, points: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_points(fit, control, points)?;
    let beta = DVector::from_column_slice(&fit.beta_hat);
    let offsets = control * DVector::from_column_slice(&fit.psi_hat);
    let base = points * &beta;
    Ok(base.map(|b| {
        if offsets.is_empty() {
            normal::cdf(b)
        } else {
            offsets.iter().map(|o| normal::cdf(b + o)).sum::<f64>() / offsets.len() as f64
        }
    }))
}

/// `APE(y₂) = [n⁻¹ Σ_i φ(y₂'β̂ + V̂_i'ψ̂)] β̂`, one row per point.
pub fn ape(fit: &SecondStageFit, control: &DMatrix<f64>, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_points(fit, control, points)?;
    let beta = DVector::from_column_slice(&fit.beta_hat);
    let offsets = control * DVector::from_column_slice(&fit.psi_hat);
    let base = points * &beta;
    let mut out = DMatrix::zeros(points.nrows(), beta.len());
    for (m, &b) in base.iter().enumerate() {
        let density = if offsets.is_empty() {
            normal::pdf(b)
        } else {
            offsets.iter().map(|o| normal::pdf(b + o)).sum::<f64>() / offsets.len() as f64
        };
        out.row_mut(m).copy_from(&(beta.transpose() * density));
    }
    Ok(out)
}
