//! Regularization parameter grid and Mallows-Cp selection on the first stage.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::first_stage::{first_stage_f, hat_traces};
use crate::hilbert::{CovarianceEigensystem, FilterKind, FilterScheme};

pub const GRID_POINTS: usize = 25;
pub const GRID_EXPONENT: f64 = -0.6;
pub const GRID_SPAN: f64 = 0.001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaGrid {
    pub points: Vec<f64>,
    pub c_a: f64,
    pub exponent: f64,
}

/// Scale constant `c_a = ‖Σ_Z‖^k max{0.1, 1/F}` with `k = 1` for Tikhonov and `k = 2` for spectral cut-off.
pub fn grid_constant(cov_norm: f64, kind: FilterKind, f_stat: f64) -> Result<f64> {
    if !(cov_norm > 0.0) || !(f_stat > 0.0) {
        return Err(Error::InvalidParameter("covariance norm and F statistic must be positive".into()));
    }
    let factor = (1.0 / f_stat).max(0.1);
    match kind {
        FilterKind::Tikhonov => Ok(cov_norm * factor),
        FilterKind::SpectralCutoff => Ok(cov_norm * cov_norm * factor),
        FilterKind::Ridge => Err(Error::InvalidParameter(
            "automatic regularization is defined for Tikhonov and spectral cut-off only".into(),
        )),
    }
}

/// 25 equally spaced points between `c_a n^-0.6 · 0.001` and `c_a n^-0.6`.
pub fn grid_from_constant(n: usize, c_a: f64) -> Result<AlphaGrid> {
    if n < 2 {
        return Err(Error::DegenerateSample(format!("need n >= 2, got {n}")));
    }
    if !(c_a > 0.0) || !c_a.is_finite() {
        return Err(Error::InvalidParameter("grid constant must be positive".into()));
    }
    let hi = c_a * (n as f64).powf(GRID_EXPONENT);
    let lo = hi * GRID_SPAN;
    let step = (hi - lo) / (GRID_POINTS - 1) as f64;
    let mut points: Vec<f64> = (0..GRID_POINTS).map(|k| lo + step * k as f64).collect();
    points[GRID_POINTS - 1] = hi;
    Ok(AlphaGrid { points, c_a, exponent: GRID_EXPONENT })
}

pub fn build_alpha_grid(n: usize, cov_norm: f64, kind: FilterKind, f_stat: f64) -> Result<AlphaGrid> {
    grid_from_constant(n, grid_constant(cov_norm, kind, f_stat)?)
}

/// `‖(I − P_α) w‖²` from the spectral projections of `w`.
fn residual_ss(w_norm2: f64, proj: &DVector<f64>, eig: &CovarianceEigensystem, scheme: &FilterScheme) -> f64 {
    let mut rss = w_norm2;
    for (j, &kappa) in eig.eigenvalues.iter().enumerate() {
        let q = scheme.q(kappa);
        let a2 = proj[j] * proj[j];
        rss += (q * q - 2.0 * q) * a2;
    }
    rss.max(0.0)
}

/// `Cp(α) = n⁻¹‖(I − P_α) w‖² + 2 σ² tr(P_α) / n`.
pub fn mallows_cp(w: &DVector<f64>, eig: &CovarianceEigensystem, scheme: &FilterScheme, sigma2: f64) -> Result<f64> {
    let n = eig.n();
    if w.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: w.len() });
    }
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidParameter("pilot variance must be positive".into()));
    }
    let proj = eig.project(w);
    let nf = n as f64;
    let rss = residual_ss(w.norm_squared(), &proj, eig, scheme);
    Ok(rss / nf + 2.0 * sigma2 * hat_traces(eig, scheme).trace / nf)
}

/// Pilot noise variance: residual variance of `w` at the least regularized grid point.
pub fn pilot_variance(w: &DVector<f64>, eig: &CovarianceEigensystem, scheme: &FilterScheme) -> f64 {
    let proj = eig.project(w);
    let rss = residual_ss(w.norm_squared(), &proj, eig, scheme);
    let df = (eig.n() as f64 - hat_traces(eig, scheme).trace).max(1.0);
    rss / df
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSelection {
    pub alpha: f64,
    pub kind: FilterKind,
    pub grid: AlphaGrid,
    pub curve: Vec<f64>,
    pub sigma2: f64,
}

/// Minimize Cp over the grid for `w = Y₂ h`. Ties go to the smaller α.
pub fn select_alpha(
    y2: &DMatrix<f64>,
    eig: &CovarianceEigensystem,
    kind: FilterKind,
    grid: &AlphaGrid,
    h: &DVector<f64>,
) -> Result<AlphaSelection> {
    if h.len() != y2.ncols() {
        return Err(Error::DimensionMismatch { expected: y2.ncols(), got: h.len() });
    }
    if grid.points.is_empty() {
        return Err(Error::InvalidParameter("empty regularization grid".into()));
    }
    if eig.rank() == 0 {
        return Err(Error::NoSignal);
    }
    let w = y2 * h;
    let pilot = FilterScheme::new(kind, grid.points[0])?;
    let mut sigma2 = pilot_variance(&w, eig, &pilot);
    if !(sigma2 > 0.0) {
        sigma2 = f64::MIN_POSITIVE;
    }
    let mut curve = Vec::with_capacity(grid.points.len());
    let mut best = (f64::INFINITY, grid.points[0]);
    for &alpha in &grid.points {
        let cp = mallows_cp(&w, eig, &FilterScheme::new(kind, alpha)?, sigma2)?;
        if cp < best.0 {
            best = (cp, alpha);
        }
        curve.push(cp);
    }
    Ok(AlphaSelection { alpha: best.1, kind, grid: grid.clone(), curve, sigma2 })
}

/// Default direction `h`: ones on endogenous columns, zero elsewhere.
pub fn default_direction(endog_mask: &[bool]) -> DVector<f64> {
    DVector::from_iterator(endog_mask.len(), endog_mask.iter().map(|&e| if e { 1.0 } else { 0.0 }))
}

/// The full automatic rule: F from each endogenous column (smallest kept),
/// `‖Σ_Z‖` as the largest eigenvalue, grid, then Cp.
pub fn auto_alpha(
    y2: &DMatrix<f64>,
    eig: &CovarianceEigensystem,
    kind: FilterKind,
    endog_mask: &[bool],
) -> Result<AlphaSelection> {
    if endog_mask.len() != y2.ncols() {
        return Err(Error::DimensionMismatch { expected: y2.ncols(), got: endog_mask.len() });
    }
    let mut f_min = f64::INFINITY;
    for (col, _) in endog_mask.iter().enumerate().filter(|(_, &e)| e) {
        let f = first_stage_f(&y2.column(col).into_owned(), eig)?;
        f_min = f_min.min(f.f);
    }
    if !f_min.is_finite() {
        return Err(Error::InvalidParameter("at least one regressor must be endogenous".into()));
    }
    let f_min = f_min.max(f64::MIN_POSITIVE);
    let grid = build_alpha_grid(eig.n(), eig.operator_norm(), kind, f_min)?;
    select_alpha(y2, eig, kind, &grid, &default_direction(endog_mask))
}
