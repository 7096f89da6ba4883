//! Regularized first stage: `Π̂_α = (n⁻¹ Σ Y_2i ⊗ Z_i) K_nα⁻¹`, fitted values,
//! control-function residuals, hat-operator traces and the first-stage F.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::hilbert::{CovarianceEigensystem, FilterScheme};

/// Cap on the F statistic reported when the residual sum of squares vanishes.
pub const F_SENTINEL: f64 = 1e12;
/// Number of leading principal-component scores used for functional instruments.
pub const FUNCTIONAL_F_COMPONENTS: usize = 25;

#[derive(Debug, Clone)]
pub struct FirstStageFit {
    pub scheme: FilterScheme,
    /// `c_jℓ = κ_j⁻¹ q(κ_j, α) n⁻¹ Σ_i ⟨Z_i, φ_j⟩ Y_2iℓ`; zero in exogenous columns.
    pub coef_spectral: DMatrix<f64>,
    pub gamma_hat: DMatrix<f64>,
    pub v_hat: DMatrix<f64>,
    pub q_values: DVector<f64>,
    pub endog_mask: Vec<bool>,
}

impl FirstStageFit {
    pub fn alpha(&self) -> f64 {
        self.scheme.alpha
    }

    pub fn n(&self) -> usize {
        self.gamma_hat.nrows()
    }

    pub fn endogenous_columns(&self) -> Vec<usize> {
        self.endog_mask.iter().enumerate().filter(|(_, &e)| e).map(|(k, _)| k).collect()
    }

    /// Residuals restricted to the endogenous columns, `n × d_endog`.
    pub fn v_hat_endog(&self) -> DMatrix<f64> {
        let cols = self.endogenous_columns();
        self.v_hat.select_columns(cols.iter())
    }

    /// Representers `b_ℓ` of the first-stage functionals in ambient
    /// coordinates, `Π̂_α h = ⟨b_ℓ, h⟩`, one column per regressor.
    pub fn representers(&self, eig: &CovarianceEigensystem) -> DMatrix<f64> {
        &eig.eigenvectors * &self.coef_spectral
    }

    /// `Π̂_α h` for a centered element `h` of the instrument space.
    pub fn predict(&self, eig: &CovarianceEigensystem, h: &DVector<f64>) -> Result<DVector<f64>> {
        let dim = eig.space.dim();
        if h.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: h.len() });
        }
        let w = eig.space.quadrature_weights();
        let scores = eig.eigenvectors.transpose() * h.component_mul(&w);
        Ok(self.coef_spectral.transpose() * scores)
    }
}

/// Fit the regularized first stage for every endogenous column of `y2`.
/// Exogenous columns pass through with `γ̂ = Y_2` and `V̂ = 0`.
pub fn fit_first_stage(
    y2: &DMatrix<f64>,
    eig: &CovarianceEigensystem,
    scheme: &FilterScheme,
    endog_mask: &[bool],
) -> Result<FirstStageFit> {
    let (n, d_e) = y2.shape();
    if n != eig.n() {
        return Err(Error::DimensionMismatch { expected: eig.n(), got: n });
    }
    if endog_mask.len() != d_e {
        return Err(Error::DimensionMismatch { expected: d_e, got: endog_mask.len() });
    }
    if !endog_mask.iter().any(|&e| e) {
        return Err(Error::InvalidParameter("at least one regressor must be endogenous".into()));
    }
    if n < d_e + 1 {
        return Err(Error::DegenerateSample(format!("need n >= d_e + 1 (n = {n}, d_e = {d_e})")));
    }
    if !(scheme.alpha > 0.0) {
        return Err(Error::InvalidParameter("regularization parameter must be positive".into()));
    }
    if eig.rank() == 0 {
        return Err(Error::NoSignal);
    }

    let r = eig.rank();
    let nf = n as f64;
    let q_values = DVector::from_iterator(r, eig.eigenvalues.iter().map(|&k| scheme.q(k)));
    let mut coef_spectral = DMatrix::zeros(r, d_e);
    let mut gamma_hat = y2.clone();
    let mut v_hat = DMatrix::zeros(n, d_e);

    for (col, _) in endog_mask.iter().enumerate().filter(|(_, &e)| e) {
        let y = y2.column(col);
        let cross = eig.dual_scores.transpose() * y / nf;
        let coef = DVector::from_iterator(r, (0..r).map(|j| q_values[j] / eig.eigenvalues[j] * cross[j]));
        let fitted = &eig.dual_scores * &coef;
        coef_spectral.set_column(col, &coef);
        for i in 0..n {
            v_hat[(i, col)] = y[i] - fitted[i];
            gamma_hat[(i, col)] = fitted[i];
        }
    }

    Ok(FirstStageFit { scheme: *scheme, coef_spectral, gamma_hat, v_hat, q_values, endog_mask: endog_mask.to_vec() })
}

/// Traces of the regularized hat operator and of its square.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HatTraces {
    pub trace: f64,
    pub trace_sq: f64,
}

pub fn hat_traces(eig: &CovarianceEigensystem, scheme: &FilterScheme) -> HatTraces {
    let (trace, trace_sq) = eig.eigenvalues.iter().fold((0.0, 0.0), |(t, t2), &k| {
        let q = scheme.q(k);
        (t + q, t2 + q * q)
    });
    HatTraces { trace, trace_sq }
}

/// OLS F statistic for the joint significance of the instruments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstStageF {
    pub f: f64,
    pub df_num: usize,
    pub df_den: usize,
    /// Set when the instrument design was rank deficient (or saturated) and the
    /// statistic was computed on the retained principal components.
    pub reduced: bool,
}

/// First-stage F of `y2` on the instruments behind `eig`, with an intercept.
///
/// Euclidean instruments use every retained principal component, which spans
/// the same column space as the centered design (the pseudo-inverse fit when
/// the design is singular). Functional instruments use the leading
/// `min(25, rank)` component scores.
pub fn first_stage_f(y2: &DVector<f64>, eig: &CovarianceEigensystem) -> Result<FirstStageF> {
    let n = y2.len();
    if n != eig.n() {
        return Err(Error::DimensionMismatch { expected: eig.n(), got: n });
    }
    if eig.rank() == 0 {
        return Err(Error::NoSignal);
    }
    let rank = eig.rank();
    let mut m = rank;
    let mut reduced = rank < eig.space.dim();
    if eig.space.is_functional() {
        m = m.min(FUNCTIONAL_F_COMPONENTS);
    }
    if m + 2 > n {
        m = FUNCTIONAL_F_COMPONENTS.min(rank).min(n.saturating_sub(2));
        reduced = true;
    }
    if m == 0 {
        return Err(Error::DegenerateSample("too few observations for a first-stage F".into()));
    }

    let mean = y2.mean();
    let yc = y2.map(|v| v - mean);
    let tss = yc.norm_squared();
    let basis = eig.basis.columns(0, m);
    let fitted = basis * (basis.transpose() * &yc);
    let rss = (&yc - fitted).norm_squared();
    let df_den = n - m - 1;
    let f = if tss == 0.0 {
        0.0
    } else if rss < 1e-14 * tss {
        F_SENTINEL
    } else {
        ((tss - rss) / m as f64) / (rss / df_den as f64)
    };
    Ok(FirstStageF { f, df_num: m, df_den, reduced })
}
