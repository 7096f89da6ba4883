//! Regularized control-function estimators for probit models with an
//! endogenous regressor and many weak or function-valued instruments.
//!
//! The pipeline runs in four steps:
//!
//! 1. [`hilbert`]: instruments live in an inner-product space; the centered
//!    sample covariance operator is diagonalized through the Gram dual.
//! 2. [`first_stage`]: a spectral filter (Tikhonov, spectral cut-off or ridge)
//!    regularizes the inverse and yields fitted values and control-function
//!    residuals.
//! 3. [`second_stage`]: probit likelihood (RCMLE) or nonlinear least squares
//!    (RNLSE) in the regressors and the residuals.
//! 4. [`inference`]: sandwich variances that account for the generated
//!    regressor, Wald and exogeneity tests, ASF and APE.
//!
//! [`alpha_select`] picks the regularization parameter, [`baselines`] holds the
//! comparison estimators and [`simlab`] runs the simulation designs.

pub mod alpha_select;
pub mod baselines;
pub mod error;
pub mod first_stage;
pub mod hilbert;
pub mod inference;
pub mod linalg;
pub mod normal;
pub mod second_stage;
pub mod simlab;

pub use error::{Error, Result};
pub use first_stage::{first_stage_f, fit_first_stage, hat_traces, FirstStageF, FirstStageFit, HatTraces};
pub use hilbert::{
    apply_regularized_inverse, covariance_eigensystem, covariance_eigensystem_with, filter_value, inner_product,
    CovarianceEigensystem, EigenRoute, FilterKind, FilterScheme, InstrumentSample, InstrumentSpace,
};
pub use second_stage::{
    fit_rcmle, fit_rnlse, nls_objective, probit_objective, EstimatorKind, FitOptions, SecondStageFit,
};
