//! Instrument spaces, the centered sample covariance operator and spectral
//! regularization filters.
//!
//! Instruments live either in a Euclidean space or in a space of functions
//! discretized on a common grid with quadrature weights. Both are handled
//! through a single weighted inner product `⟨a, b⟩ = Σ_k w_k a_k b_k`, with
//! unit weights in the Euclidean case.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal;

/// Relative eigenvalue floor defining the numerical rank of the covariance.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// Inner-product geometry of the instruments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InstrumentSpace {
    Euclidean { dim: usize },
    /// Functions sampled on `grid` with weights `τ(t_k)Δt_k`, optionally
    /// followed by `extra_dim` plain Euclidean coordinates (unit weight) for
    /// scalar instruments that accompany the curve.
    WeightedGrid {
        grid: Vec<f64>,
        weights: Vec<f64>,
        extra_dim: usize,
    },
}

impl InstrumentSpace {
    pub fn euclidean(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("Euclidean dimension must be >= 1".into()));
        }
        Ok(InstrumentSpace::Euclidean { dim })
    }

    pub fn weighted_grid(grid: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if grid.len() < 2 {
            return Err(Error::InvalidParameter("a weighted grid needs at least 2 points".into()));
        }
        if weights.len() != grid.len() {
            return Err(Error::DimensionMismatch { expected: grid.len(), got: weights.len() });
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("grid points must be strictly ascending".into()));
        }
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParameter("quadrature weights must be positive".into()));
        }
        Ok(InstrumentSpace::WeightedGrid { grid, weights, extra_dim: 0 })
    }

    /// `G` equally spaced points on `[lo, hi]` weighted by the standard normal
    /// density times the spacing.
    pub fn normal_weighted_grid(lo: f64, hi: f64, points: usize) -> Result<Self> {
        if points < 2 || !(hi > lo) {
            return Err(Error::InvalidParameter("need at least 2 points on a nonempty interval".into()));
        }
        let step = (hi - lo) / (points - 1) as f64;
        let grid: Vec<f64> = (0..points).map(|k| lo + step * k as f64).collect();
        let weights = grid.iter().map(|&t| normal::pdf(t) * step).collect();
        Self::weighted_grid(grid, weights)
    }

    /// Append `extra` unit-weight Euclidean coordinates to a grid space.
    pub fn with_euclidean_block(self, extra: usize) -> Result<Self> {
        match self {
            InstrumentSpace::Euclidean { dim } => Ok(InstrumentSpace::Euclidean { dim: dim + extra }),
            InstrumentSpace::WeightedGrid { grid, weights, extra_dim } => {
                Ok(InstrumentSpace::WeightedGrid { grid, weights, extra_dim: extra_dim + extra })
            }
        }
    }

    /// Number of stored coordinates per element.
    pub fn dim(&self) -> usize {
        match self {
            InstrumentSpace::Euclidean { dim } => *dim,
            InstrumentSpace::WeightedGrid { grid, extra_dim, .. } => grid.len() + extra_dim,
        }
    }

    pub fn is_functional(&self) -> bool {
        matches!(self, InstrumentSpace::WeightedGrid { .. })
    }

    /// Per-coordinate weights of the inner product.
    pub fn quadrature_weights(&self) -> DVector<f64> {
        match self {
            InstrumentSpace::Euclidean { dim } => DVector::from_element(*dim, 1.0),
            InstrumentSpace::WeightedGrid { weights, extra_dim, .. } => {
                let mut w = weights.clone();
                w.extend(std::iter::repeat(1.0).take(*extra_dim));
                DVector::from_vec(w)
            }
        }
    }

    /// The Euclidean space of the same dimension viewed as a grid with unit weights.
    pub fn unit_weight_grid(dim: usize) -> Result<Self> {
        let grid = (0..dim).map(|k| k as f64).collect();
        Self::weighted_grid(grid, vec![1.0; dim])
    }
}

/// `⟨h1, h2⟩` in the given space.
pub fn inner_product(h1: &DVector<f64>, h2: &DVector<f64>, space: &InstrumentSpace) -> Result<f64> {
    let dim = space.dim();
    for h in [h1, h2] {
        if h.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: h.len() });
        }
    }
    Ok(match space {
        InstrumentSpace::Euclidean { .. } => h1.dot(h2),
        InstrumentSpace::WeightedGrid { .. } => {
            let w = space.quadrature_weights();
            h1.iter().zip(h2.iter()).zip(w.iter()).map(|((a, b), w)| a * b * w).sum()
        }
    })
}

/// `n` instrument observations, one per row of `values`.
#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentSample {
    values: DMatrix<f64>,
    space: InstrumentSpace,
    centered: bool,
    mean: DVector<f64>,
}

impl InstrumentSample {
    pub fn new(values: DMatrix<f64>, space: InstrumentSpace) -> Result<Self> {
        if values.ncols() != space.dim() {
            return Err(Error::DimensionMismatch { expected: space.dim(), got: values.ncols() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("instrument values must be finite".into()));
        }
        let mean = DVector::zeros(values.ncols());
        Ok(InstrumentSample { values, space, centered: false, mean })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn space(&self) -> &InstrumentSpace {
        &self.space
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    /// Mean removed by [`center`](Self::center); zero before centering.
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Subtract the coordinatewise sample mean. Idempotent.
    pub fn center(&self) -> Result<InstrumentSample> {
        let n = self.n();
        if n < 2 {
            return Err(Error::DegenerateSample(format!("centering needs n >= 2, got {n}")));
        }
        if self.centered {
            return Ok(self.clone());
        }
        let mean = self.values.row_mean().transpose();
        let mut values = self.values.clone();
        for mut row in values.row_iter_mut() {
            row -= mean.transpose();
        }
        Ok(InstrumentSample { values, space: self.space.clone(), centered: true, mean })
    }

    /// Apply the stored centering to a new element of the space.
    pub fn center_element(&self, h: &DVector<f64>) -> Result<DVector<f64>> {
        if h.len() != self.space.dim() {
            return Err(Error::DimensionMismatch { expected: self.space.dim(), got: h.len() });
        }
        Ok(h - &self.mean)
    }

    /// Keep only the listed observations (used by resampling schemes).
    pub fn select_rows(&self, rows: &[usize]) -> InstrumentSample {
        let values = self.values.select_rows(rows.iter());
        InstrumentSample { values, space: self.space.clone(), centered: false, mean: DVector::zeros(self.space.dim()) }
    }
}

/// Which factorization computes the eigensystem of the sample covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EigenRoute {
    /// The `n × n` Gram matrix `[⟨Z_i, Z_j⟩ / n]`.
    Dual,
    /// The `D × D` weighted covariance matrix in the ambient coordinates.
    Ambient,
    /// Whichever of the two is smaller.
    Auto,
}

/// Spectral decomposition of `K_n = n⁻¹ Σ Z_i ⊗ Z_i`.
#[derive(Debug, Clone)]
pub struct CovarianceEigensystem {
    /// Descending, strictly positive retained eigenvalues.
    pub eigenvalues: DVector<f64>,
    /// Eigenfunctions in ambient coordinates, one per column, orthonormal
    /// under the space's inner product.
    pub eigenvectors: DMatrix<f64>,
    /// `⟨Z_i, φ_j⟩`, `n × r`.
    pub dual_scores: DMatrix<f64>,
    /// Orthonormal sample-space directions `u_j = s_j / sqrt(n κ_j)`, `n × r`.
    pub basis: DMatrix<f64>,
    pub space: InstrumentSpace,
}

impl CovarianceEigensystem {
    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn n(&self) -> usize {
        self.dual_scores.nrows()
    }

    /// Largest eigenvalue, i.e. the operator norm of the sample covariance.
    pub fn operator_norm(&self) -> f64 {
        if self.rank() == 0 { 0.0 } else { self.eigenvalues[0] }
    }

    /// `u_j'w` for each retained direction.
    pub fn project(&self, w: &DVector<f64>) -> DVector<f64> {
        self.basis.transpose() * w
    }
}

/// Eigensystem of the centered sample covariance, via the cheaper of the
/// Gram-dual and ambient factorizations.
pub fn covariance_eigensystem(z: &InstrumentSample) -> Result<CovarianceEigensystem> {
    covariance_eigensystem_with(z, EigenRoute::Auto)
}

pub fn covariance_eigensystem_with(z: &InstrumentSample, route: EigenRoute) -> Result<CovarianceEigensystem> {
    if !z.is_centered() {
        return Err(Error::InvalidParameter("covariance eigensystem requires a centered sample".into()));
    }
    let n = z.n();
    let dim = z.space().dim();
    let use_dual = match route {
        EigenRoute::Dual => true,
        EigenRoute::Ambient => false,
        EigenRoute::Auto => n <= dim,
    };
    let w = z.space().quadrature_weights();
    let sqrt_w = w.map(f64::sqrt);
    let nf = n as f64;

    // Z W^{1/2}: rows are observations in an orthonormal coordinate system.
    let mut zw = z.values().clone();
    for (k, mut col) in zw.column_iter_mut().enumerate() {
        col *= sqrt_w[k];
    }

    let (values, vectors) = if use_dual {
        let gram = (&zw * zw.transpose()) / nf;
        sorted_eigen(gram)
    } else {
        let cov = (zw.transpose() * &zw) / nf;
        sorted_eigen(cov)
    };

    let top = values.first().copied().unwrap_or(0.0);
    let floor = top * RANK_TOLERANCE;
    let rank = if top > 0.0 {
        values.iter().take_while(|&&v| v > floor && v > 0.0).count()
    } else {
        0
    };

    let eigenvalues = DVector::from_iterator(rank, values.iter().copied().take(rank));
    let mut eigenvectors = DMatrix::zeros(dim, rank);
    let mut dual_scores = DMatrix::zeros(n, rank);
    let mut basis = DMatrix::zeros(n, rank);
    for j in 0..rank {
        let kappa = eigenvalues[j];
        let scale = (nf * kappa).sqrt();
        let v = vectors.column(j);
        let (u, orth_coords) = if use_dual {
            let u = v.into_owned();
            (u.clone(), zw.transpose() * &u / scale)
        } else {
            let s = &zw * v;
            (s / scale, v.into_owned())
        };
        // Fix the sign so that the largest-magnitude ambient coordinate is positive.
        let pivot = orth_coords.iamax();
        let sign = if orth_coords[pivot] < 0.0 { -1.0 } else { 1.0 };
        let phi = orth_coords.component_div(&sqrt_w) * sign;
        let u = u * sign;
        eigenvectors.set_column(j, &phi);
        dual_scores.set_column(j, &(&u * scale));
        basis.set_column(j, &u);
    }

    Ok(CovarianceEigensystem { eigenvalues, eigenvectors, dual_scores, basis, space: z.space().clone() })
}

fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = eig.eigenvectors.select_columns(order.iter());
    (values, vectors)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Tikhonov,
    SpectralCutoff,
    Ridge,
}

impl FilterKind {
    pub fn name(self) -> &'static str {
        match self {
            FilterKind::Tikhonov => "tikhonov",
            FilterKind::SpectralCutoff => "spectral_cutoff",
            FilterKind::Ridge => "ridge",
        }
    }
}

impl std::str::FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "tikhonov" | "t" => Ok(FilterKind::Tikhonov),
            "spectral_cutoff" | "spectralcutoff" | "sc" | "cutoff" => Ok(FilterKind::SpectralCutoff),
            "ridge" => Ok(FilterKind::Ridge),
            other => Err(Error::InvalidParameter(format!("unknown regularization scheme '{other}'"))),
        }
    }
}

/// A regularization scheme together with its parameter `α > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterScheme {
    pub kind: FilterKind,
    pub alpha: f64,
}

impl FilterScheme {
    pub fn new(kind: FilterKind, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidParameter(format!("regularization parameter must be positive, got {alpha}")));
        }
        Ok(FilterScheme { kind, alpha })
    }

    pub fn tikhonov(alpha: f64) -> Result<Self> {
        Self::new(FilterKind::Tikhonov, alpha)
    }

    pub fn spectral_cutoff(alpha: f64) -> Result<Self> {
        Self::new(FilterKind::SpectralCutoff, alpha)
    }

    pub fn ridge(alpha: f64) -> Result<Self> {
        Self::new(FilterKind::Ridge, alpha)
    }

    /// The filter `q(κ, α)`.
    pub fn q(&self, kappa: f64) -> f64 {
        filter_value(kappa, self)
    }
}

/// `q(κ, α)` for the three supported schemes; `q(0, α) = 0`.
pub fn filter_value(kappa: f64, scheme: &FilterScheme) -> f64 {
    if !(kappa > 0.0) {
        return 0.0;
    }
    let alpha = scheme.alpha;
    match scheme.kind {
        FilterKind::Tikhonov => {
            let k2 = kappa * kappa;
            k2 / (k2 + alpha)
        }
        FilterKind::Ridge => kappa / (kappa + alpha),
        FilterKind::SpectralCutoff => {
            if kappa * kappa >= alpha { 1.0 } else { 0.0 }
        }
    }
}

/// `Σ_j κ_j⁻¹ q(κ_j, α) ⟨h, φ_j⟩ φ_j` over the retained eigenpairs.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizedImage {
    pub element: DVector<f64>,
    /// Set when the eigensystem has rank 0 and the image is the zero element.
    pub rank_zero: bool,
}

pub fn apply_regularized_inverse(
    eig: &CovarianceEigensystem,
    scheme: &FilterScheme,
    h: &DVector<f64>,
) -> Result<RegularizedImage> {
    let dim = eig.space.dim();
    if h.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: h.len() });
    }
    let mut element = DVector::zeros(dim);
    if eig.rank() == 0 {
        return Ok(RegularizedImage { element, rank_zero: true });
    }
    let w = eig.space.quadrature_weights();
    let hw = h.component_mul(&w);
    for j in 0..eig.rank() {
        let kappa = eig.eigenvalues[j];
        let phi = eig.eigenvectors.column(j);
        let coef = scheme.q(kappa) / kappa * hw.dot(&phi);
        element.axpy(coef, &phi, 1.0);
    }
    Ok(RegularizedImage { element, rank_zero: false })
}
