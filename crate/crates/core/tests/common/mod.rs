#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use regcf::simlab::{fixed_draws, generate, Dataset, ScenarioConfig};
use regcf::{covariance_eigensystem, CovarianceEigensystem, FilterScheme, InstrumentSample};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, n: usize, k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, k, |_, _| rng.sample(StandardNormal))
}

pub fn normal_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Gaussian design with `dz` independent unit-variance instruments and
/// first-stage R² of one half. The first instrument doubles as the included
/// exogenous regressor.
pub fn strong_config(n: usize, dz: usize, rho: f64) -> ScenarioConfig {
    ScenarioConfig { k: dz, s: 1.0, sigma_z2: 1.0, rho_z: 0.0, rho, ..ScenarioConfig::gaussian(n, 1.0, n as f64) }
}

pub fn strong_dataset(n: usize, dz: usize, rho: f64, seed: u64) -> Dataset {
    let cfg = strong_config(n, dz, rho).with_seed(seed);
    generate(&cfg, &fixed_draws(&cfg), 0).unwrap()
}

pub fn centered_eig(data: &Dataset) -> (InstrumentSample, CovarianceEigensystem) {
    let z = data.instruments.center().unwrap();
    let eig = covariance_eigensystem(&z).unwrap();
    (z, eig)
}

/// Hat matrix `Z (K² + αI)⁻¹ K Z' / n` for unit-weight Euclidean instruments.
pub fn dense_tikhonov_hat(z: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    let n = z.nrows() as f64;
    let k = z.transpose() * z / n;
    let reg = &k * &k + DMatrix::identity(k.nrows(), k.ncols()) * alpha;
    let inv = reg.try_inverse().unwrap();
    z * inv * k * z.transpose() / n
}

/// Hat matrix `Z [Σ_j q(κ_j) κ_j⁻¹ φ_j φ_j'] Z' / n` from a dense ambient eigendecomposition.
pub fn dense_hat(z: &DMatrix<f64>, scheme: &FilterScheme) -> DMatrix<f64> {
    let n = z.nrows() as f64;
    let k = z.transpose() * z / n;
    let eig = SymmetricEigen::new(k.clone());
    let top = eig.eigenvalues.max();
    let mut m = DMatrix::zeros(k.nrows(), k.ncols());
    for j in 0..eig.eigenvalues.len() {
        let kappa = eig.eigenvalues[j];
        if kappa > top * 1e-12 {
            let phi = eig.eigenvectors.column(j);
            m += phi * phi.transpose() * (scheme.q(kappa) / kappa);
        }
    }
    z * m * z.transpose() / n
}

/// Probit outcome `1{x'θ + e ≥ 0}`.
pub fn probit_outcome(rng: &mut ChaCha8Rng, x: &DMatrix<f64>, theta: &DVector<f64>) -> DVector<f64> {
    let index = x * theta;
    DVector::from_fn(x.nrows(), |i, _| {
        let e: f64 = rng.sample(StandardNormal);
        if index[i] + e >= 0.0 { 1.0 } else { 0.0 }
    })
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`.
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.amax().max(b.amax());
    if scale == 0.0 { 0.0 } else { (a - b).amax() / scale }
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}
