//! Data generating processes: Gaussian instruments, a noisy factor structure
//! and a function-valued instrument.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{InstrumentSample, InstrumentSpace};
use crate::normal;

/// Stream reserved for quantities drawn once per experiment.
pub const FIXED_STREAM: u64 = u64::MAX;
pub const PRESAMPLE_SIZE: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    Gaussian,
    Factor,
    Functional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub kind: DesignKind,
    pub n: usize,
    /// Number of true instruments.
    pub k: usize,
    /// Number of observed noisy instruments (factor design).
    pub k_tilde: usize,
    pub s: f64,
    pub mu2: f64,
    pub rho: f64,
    pub sigma_z2: f64,
    pub rho_z: f64,
    pub sigma_tilde: f64,
    pub beta: [f64; 2],
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_points: usize,
    pub reps: usize,
    pub base_seed: u64,
}

impl ScenarioConfig {
    pub fn gaussian(n: usize, s: f64, mu2: f64) -> Self {
        ScenarioConfig {
            kind: DesignKind::Gaussian,
            n,
            k: 50,
            k_tilde: 0,
            s,
            mu2,
            rho: 0.6,
            sigma_z2: 0.5,
            rho_z: 0.7,
            sigma_tilde: 0.0,
            beta: [1.0, -1.0],
            grid_lo: -5.0,
            grid_hi: 5.0,
            grid_points: 100,
            reps: 2000,
            base_seed: 20240101,
        }
    }

    pub fn factor(n: usize, mu2: f64) -> Self {
        ScenarioConfig {
            kind: DesignKind::Factor,
            k: 5,
            k_tilde: 100,
            s: 1.0,
            sigma_z2: 1.0,
            rho_z: 0.0,
            sigma_tilde: 0.3,
            ..Self::gaussian(n, 1.0, mu2)
        }
    }

    pub fn functional(n: usize, mu2: f64) -> Self {
        ScenarioConfig { kind: DesignKind::Functional, k: 2, s: 1.0, sigma_z2: 1.0, rho_z: 0.0, ..Self::gaussian(n, 1.0, mu2) }
    }

    /// Named scenarios: `gaussian-s02-mu30-n200`, `factor-mu60-n400`, `functional-mu60-n200`.
    pub fn named(name: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("unknown scenario name '{name}'"));
        let parts: Vec<&str> = name.split('-').collect();
        let field = |prefix: &str| -> Result<f64> {
            parts
                .iter()
                .find_map(|p| p.strip_prefix(prefix))
                .ok_or_else(bad)?
                .parse::<f64>()
                .map_err(|_| bad())
        };
        let n = field("n")? as usize;
        let mu2 = field("mu")?;
        match parts.first().copied() {
            Some("gaussian") => {
                let digits = parts.iter().find_map(|p| p.strip_prefix('s')).ok_or_else(bad)?;
                let s = format!("{}.{}", &digits[..1], &digits[1..]).parse::<f64>().map_err(|_| bad())?;
                Ok(Self::gaussian(n, s, mu2))
            }
            Some("factor") => Ok(Self::factor(n, mu2)),
            Some("functional") => Ok(Self::functional(n, mu2)),
            _ => Err(bad()),
        }
    }

    pub fn with_reps(mut self, reps: usize) -> Self {
        self.reps = reps;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.base_seed = seed;
        self
    }

    /// `⌊sK⌋` instruments with a nonzero first-stage coefficient.
    pub fn relevant(&self) -> usize {
        (self.s * self.k as f64 + 1e-9).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidParameter(m.into()));
        if self.n < 10 {
            return fail("n must be at least 10");
        }
        if self.k == 0 || !(self.s > 0.0 && self.s <= 1.0) || self.relevant() == 0 {
            return fail("need at least one relevant instrument");
        }
        if !(self.mu2 >= 0.0) {
            return fail("concentration parameter must be nonnegative");
        }
        if !(self.rho.abs() < 1.0) || !(self.rho_z.abs() < 1.0) || !(self.sigma_z2 > 0.0) {
            return fail("need |rho| < 1, |rho_z| < 1 and sigma_z2 > 0");
        }
        if self.kind == DesignKind::Factor && (self.k_tilde == 0 || self.sigma_tilde < 0.0) {
            return fail("factor design needs k_tilde >= 1 and sigma_tilde >= 0");
        }
        if self.kind == DesignKind::Functional && self.grid_points < 2 {
            return fail("functional design needs at least two grid points");
        }
        Ok(())
    }

    pub fn sigma_z(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.k, self.k, |i, j| self.sigma_z2 * self.rho_z.powi((i as i32 - j as i32).abs()))
    }

    pub fn pi_tilde(&self) -> DVector<f64> {
        let m = self.relevant();
        DVector::from_fn(self.k, |i, _| if i < m { 1.0 } else { 0.0 })
    }
}

/// Scale `c*` with `μ² = n π'Σπ / (1 - π'Σπ)` at `π = c* π̃`.
pub fn solve_cstar(mu2: f64, n: usize, pi_tilde: &DVector<f64>, sigma_z: &DMatrix<f64>) -> Result<f64> {
    if !(mu2 >= 0.0) || n == 0 {
        return Err(Error::Infeasible(format!("concentration parameter {mu2} with n = {n}")));
    }
    let quad = (pi_tilde.transpose() * sigma_z * pi_tilde)[(0, 0)];
    if !(quad > 0.0) {
        return Err(Error::Infeasible("π̃'Σπ̃ must be positive".into()));
    }
    let nf = n as f64;
    Ok((mu2 / ((nf + mu2) * quad)).sqrt())
}

/// `n π'Σπ / (1 - π'Σπ)`.
pub fn concentration(n: usize, pi: &DVector<f64>, sigma_z: &DMatrix<f64>) -> f64 {
    let quad = (pi.transpose() * sigma_z * pi)[(0, 0)];
    n as f64 * quad / (1.0 - quad)
}

/// Beta(2, 5) density.
pub fn beta25_density(z: f64) -> f64 {
    if (0.0..=1.0).contains(&z) {
        30.0 * z * (1.0 - z).powi(4)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Truth {
    pub beta: [f64; 2],
    /// Coefficient on the true first-stage error in the control-function
    /// index, `P(y = 1 | Y₂, v) = Φ(Y₂'β + ψ₀ v)`; equals `-ρσ₁/σ₂`.
    pub psi0: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    /// `n⁻¹ Σ φ(g_i'θ₀) β₁`, the linear-probability comparison value.
    pub ttsls_target: f64,
}

/// One replication. `y2 = [y₂, z₁]` with `y₂` endogenous.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub y: DVector<f64>,
    pub y2: DMatrix<f64>,
    pub endog_mask: Vec<bool>,
    /// Observed instruments (uncentered).
    pub instruments: InstrumentSample,
    /// Finite design for the OLS first stage; absent for function-valued instruments.
    pub linear_design: Option<DMatrix<f64>>,
    /// True relevant instruments for the infeasible two-step baseline.
    pub infeasible_design: DMatrix<f64>,
    /// Structural error in `y = 1{Y₂'β + u ≥ 0}`.
    pub u: DVector<f64>,
    /// First-stage error.
    pub v: DVector<f64>,
    pub truth: Truth,
}

/// Objects drawn once per experiment from [`FIXED_STREAM`].
#[derive(Debug, Clone)]
pub struct FixedDraws {
    /// `K̃ × K` loadings (factor design).
    pub loadings: Option<DMatrix<f64>>,
    /// Presample covariance of `(z₁, f(z₂))` (functional design).
    pub presample_cov: Option<DMatrix<f64>>,
}

pub fn replication_rng(base_seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(rep);
    rng
}

pub fn fixed_draws(cfg: &ScenarioConfig) -> FixedDraws {
    let mut rng = replication_rng(cfg.base_seed, FIXED_STREAM);
    match cfg.kind {
        DesignKind::Gaussian => FixedDraws { loadings: None, presample_cov: None },
        DesignKind::Factor => {
            let m = DMatrix::from_fn(cfg.k_tilde, cfg.k, |_, _| rng.random_range(-1.0..=1.0));
            FixedDraws { loadings: Some(m), presample_cov: None }
        }
        DesignKind::Functional => {
            let mut draws = DMatrix::zeros(PRESAMPLE_SIZE, 2);
            for i in 0..PRESAMPLE_SIZE {
                draws[(i, 0)] = rng.sample(StandardNormal);
                draws[(i, 1)] = beta25_density(rng.random::<f64>());
            }
            let mean = draws.row_mean();
            let centered = DMatrix::from_fn(PRESAMPLE_SIZE, 2, |i, j| draws[(i, j)] - mean[j]);
            let cov = centered.transpose() * &centered / (PRESAMPLE_SIZE - 1) as f64;
            FixedDraws { loadings: None, presample_cov: Some(cov) }
        }
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, n: usize, k: usize) -> DMatrix<f64> {
    // Row-major fill keeps each observation's draws contiguous in the stream.
    let mut m = DMatrix::zeros(n, k);
    for i in 0..n {
        for j in 0..k {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}

struct Outcome {
    y: DVector<f64>,
    u: DVector<f64>,
    v: DVector<f64>,
    truth: Truth,
}

/// Draw `(u, v)`, form `y₂ = signal + v` and the binary outcome.
fn outcome(rng: &mut ChaCha8Rng, cfg: &ScenarioConfig, signal: &DVector<f64>, z1: &DVector<f64>, sigma2_sq: f64, y2: &mut DVector<f64>) -> Result<Outcome> {
    if !(sigma2_sq > 0.0) {
        return Err(Error::Infeasible(format!("first-stage error variance {sigma2_sq} is not positive")));
    }
    let n = cfg.n;
    let sigma1 = (1.0 / (1.0 - cfg.rho * cfg.rho)).sqrt();
    let sigma2 = sigma2_sq.sqrt();
    let scale = cfg.rho * sigma1 / sigma2;
    let psi0 = -scale;
    let [b1, b2] = cfg.beta;
    let mut y = DVector::zeros(n);
    let mut u = DVector::zeros(n);
    let mut v = DVector::zeros(n);
    let mut target = 0.0;
    for i in 0..n {
        let vi = sigma2 * rng.sample::<f64, _>(StandardNormal);
        let eta: f64 = rng.sample(StandardNormal);
        // Cov(u, v) = -ρσ₁σ₂ and η = u + (ρσ₁/σ₂) v is standard normal.
        let ui = eta - scale * vi;
        y2[i] = signal[i] + vi;
        u[i] = ui;
        v[i] = vi;
        let index = y2[i] * b1 + z1[i] * b2;
        y[i] = if index + ui >= 0.0 { 1.0 } else { 0.0 };
        target += normal::pdf(index + psi0 * vi);
    }
    target = target / n as f64 * b1;
    Ok(Outcome { y, u, v, truth: Truth { beta: cfg.beta, psi0, sigma1, sigma2, ttsls_target: target } })
}

fn regressors(y2: &DVector<f64>, z1: &DVector<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(y2.len(), 2);
    m.set_column(0, y2);
    m.set_column(1, z1);
    m
}

pub fn gen_gaussian(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let sigma_z = cfg.sigma_z();
    let chol = sigma_z.clone().cholesky().ok_or_else(|| Error::Infeasible("Σ_Z is not positive definite".into()))?;
    let pi = cfg.pi_tilde() * solve_cstar(cfg.mu2, cfg.n, &cfg.pi_tilde(), &sigma_z)?;
    let sigma2_sq = 1.0 - (pi.transpose() * &sigma_z * &pi)[(0, 0)];

    let z = normal_matrix(rng, cfg.n, cfg.k) * chol.l().transpose();
    let signal = &z * &pi;
    let z1 = z.column(0).into_owned();
    let mut y2 = DVector::zeros(cfg.n);
    let out = outcome(rng, cfg, &signal, &z1, sigma2_sq, &mut y2)?;

    let infeasible = z.columns(0, cfg.relevant()).into_owned();
    let instruments = InstrumentSample::new(z.clone(), InstrumentSpace::euclidean(cfg.k)?)?;
    Ok(Dataset {
        y: out.y,
        y2: regressors(&y2, &z1),
        endog_mask: vec![true, false],
        instruments,
        linear_design: Some(z),
        infeasible_design: infeasible,
        u: out.u,
        v: out.v,
        truth: out.truth,
    })
}

/// Observed instruments `Z̃ = M Z + Ṽ` followed by the included regressor `z₁`.
pub fn gen_factor(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng, loadings: &DMatrix<f64>) -> Result<Dataset> {
    if loadings.shape() != (cfg.k_tilde, cfg.k) {
        return Err(Error::DimensionMismatch { expected: cfg.k_tilde, got: loadings.nrows() });
    }
    let sigma_z = cfg.sigma_z();
    let chol = sigma_z.clone().cholesky().ok_or_else(|| Error::Infeasible("Σ_Z is not positive definite".into()))?;
    let pi = cfg.pi_tilde() * solve_cstar(cfg.mu2, cfg.n, &cfg.pi_tilde(), &sigma_z)?;
    let sigma2_sq = 1.0 - (pi.transpose() * &sigma_z * &pi)[(0, 0)];

    let z = normal_matrix(rng, cfg.n, cfg.k) * chol.l().transpose();
    let noise = normal_matrix(rng, cfg.n, cfg.k_tilde) * cfg.sigma_tilde;
    let z_tilde = &z * loadings.transpose() + noise;
    let signal = &z * &pi;
    let z1 = z.column(0).into_owned();
    let mut y2 = DVector::zeros(cfg.n);
    let out = outcome(rng, cfg, &signal, &z1, sigma2_sq, &mut y2)?;

    let mut observed = DMatrix::zeros(cfg.n, cfg.k_tilde + 1);
    observed.columns_mut(0, cfg.k_tilde).copy_from(&z_tilde);
    observed.set_column(cfg.k_tilde, &z1);
    let instruments = InstrumentSample::new(observed.clone(), InstrumentSpace::euclidean(cfg.k_tilde + 1)?)?;
    Ok(Dataset {
        y: out.y,
        y2: regressors(&y2, &z1),
        endog_mask: vec![true, false],
        instruments,
        linear_design: Some(observed),
        infeasible_design: z.columns(0, cfg.relevant()).into_owned(),
        u: out.u,
        v: out.v,
        truth: out.truth,
    })
}

/// The weighted grid of the functional design: curve points plus one scalar coordinate for `z₁`.
pub fn functional_space(cfg: &ScenarioConfig) -> Result<InstrumentSpace> {
    InstrumentSpace::normal_weighted_grid(cfg.grid_lo, cfg.grid_hi, cfg.grid_points)?.with_euclidean_block(1)
}

/// Curves `t ↦ exp(t z₂)` on the grid with `z₁` appended, `y₂ = π z₁ + π f(z₂) + v`.
pub fn gen_functional(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng, presample_cov: &DMatrix<f64>) -> Result<Dataset> {
    let n = cfg.n;
    let ones = DVector::from_element(2, 1.0);
    let pi = solve_cstar(cfg.mu2, n, &ones, presample_cov)?;
    let sigma2_sq = 1.0 - pi * pi * (ones.transpose() * presample_cov * &ones)[(0, 0)];

    let space = functional_space(cfg)?;
    let grid: Vec<f64> = match &space {
        InstrumentSpace::WeightedGrid { grid, .. } => grid.clone(),
        InstrumentSpace::Euclidean { .. } => unreachable!("functional space is a grid"),
    };
    let g = grid.len();
    let mut z1 = DVector::zeros(n);
    let mut fz2 = DVector::zeros(n);
    let mut curves = DMatrix::zeros(n, g + 1);
    for i in 0..n {
        z1[i] = rng.sample(StandardNormal);
        let z2: f64 = rng.random();
        fz2[i] = beta25_density(z2);
        for (k, &t) in grid.iter().enumerate() {
            curves[(i, k)] = (t * z2).exp();
        }
        curves[(i, g)] = z1[i];
    }
    // f has mean one under Unif[0, 1].
    let signal = (&z1 + fz2.add_scalar(-1.0)) * pi;
    let mut y2 = DVector::zeros(n);
    let out = outcome(rng, cfg, &signal, &z1, sigma2_sq, &mut y2)?;
    Ok(Dataset {
        y: out.y,
        y2: regressors(&y2, &z1),
        endog_mask: vec![true, false],
        instruments: InstrumentSample::new(curves, space)?,
        linear_design: None,
        infeasible_design: regressors(&z1, &fz2),
        u: out.u,
        v: out.v,
        truth: out.truth,
    })
}

/// Draw replication `rep` of the configured design.
pub fn generate(cfg: &ScenarioConfig, fixed: &FixedDraws, rep: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = replication_rng(cfg.base_seed, rep);
    match cfg.kind {
        DesignKind::Gaussian => gen_gaussian(cfg, &mut rng),
        DesignKind::Factor => gen_factor(cfg, &mut rng, fixed.loadings.as_ref().expect("factor loadings")),
        DesignKind::Functional => {
            gen_functional(cfg, &mut rng, fixed.presample_cov.as_ref().expect("presample covariance"))
        }
    }
}

/// Population ASF at `(y₂, z₁)`: `E_v Φ(y₂β₁ + z₁β₂ + ψ₀v) = Φ(index / σ₁)`.
pub fn true_asf(truth: &Truth, y2: f64, z1: f64) -> f64 {
    let index = y2 * truth.beta[0] + z1 * truth.beta[1];
    let scale = (1.0 + truth.psi0 * truth.psi0 * truth.sigma2 * truth.sigma2).sqrt();
    normal::cdf(index / scale)
}
