//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with a
//! nonzero status when any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use regcf::alpha_select::{mallows_cp, pilot_variance};
use regcf::baselines::fit_2scmle;
use regcf::inference::{ape, asf, estimate_vcov, exogeneity_test};
use regcf::linalg::hstack;
use regcf::simlab::{fixed_draws, generate, run_builtin, AlphaPolicy, BuiltinEstimator, Dataset, ScenarioConfig};
use regcf::{
    covariance_eigensystem, fit_first_stage, fit_rcmle, fit_rnlse, hat_traces, nls_objective, normal, probit_objective,
    FilterScheme, FitOptions, InstrumentSample, InstrumentSpace,
};

const MC_REPS: usize = 500;

struct Outcome {
    pass: bool,
    detail: String,
}

struct Check {
    pass: bool,
    notes: Vec<String>,
}

impl Check {
    fn new() -> Self {
        Check { pass: true, notes: Vec::new() }
    }

    fn require(&mut self, ok: bool, note: String) {
        self.pass &= ok;
        self.notes.push(if ok { note } else { format!("{note} [out of range]") });
    }

    fn within(&mut self, label: &str, value: f64, target: f64, tol: f64) {
        self.require((value - target).abs() <= tol, format!("{label} {value:.3} (target {target} ± {tol})"));
    }

    fn between(&mut self, label: &str, value: f64, lo: f64, hi: f64) {
        self.require((lo..=hi).contains(&value), format!("{label} {value:.3} (in [{lo}, {hi}])"));
    }

    fn below(&mut self, label: &str, value: f64, bound: f64) {
        self.require(value <= bound, format!("{label} {value:.2e} (≤ {bound:.0e})"));
    }

    fn done(self) -> Outcome {
        Outcome { pass: self.pass, detail: self.notes.join("; ") }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal_matrix(r: &mut ChaCha8Rng, n: usize, k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, k, |_, _| r.sample(StandardNormal))
}

fn normal_vector(r: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| r.sample(StandardNormal))
}

/// Independent unit-variance instruments with first-stage R² of one half.
fn strong_config(n: usize, dz: usize, rho: f64) -> ScenarioConfig {
    ScenarioConfig { k: dz, s: 1.0, sigma_z2: 1.0, rho_z: 0.0, rho, ..ScenarioConfig::gaussian(n, 1.0, n as f64) }
}

fn strong_dataset(n: usize, dz: usize, rho: f64, seed: u64) -> Dataset {
    let cfg = strong_config(n, dz, rho).with_seed(seed);
    generate(&cfg, &fixed_draws(&cfg), 0).expect("strong design")
}

fn monte_carlo(
    cfg: ScenarioConfig,
    estimators: &[BuiltinEstimator],
    check: &mut Check,
) -> Option<regcf::simlab::MonteCarloReport> {
    match run_builtin(&cfg.with_reps(MC_REPS), estimators, AlphaPolicy::Auto) {
        Ok(report) => Some(report),
        Err(e) => {
            check.require(false, format!("experiment failed: {e}"));
            None
        }
    }
}

fn table_gaussian_mu30() -> Outcome {
    let mut c = Check::new();
    let start = Instant::now();
    let suite = [BuiltinEstimator::Trcmle, BuiltinEstimator::TwoScmle, BuiltinEstimator::Probit];
    if let Some(r) = monte_carlo(ScenarioConfig::gaussian(200, 0.2, 30.0), &suite, &mut c) {
        let t = r.row("TRCMLE").unwrap();
        c.within("TRCMLE Med.Bias", t.median_bias, 0.006, 0.10);
        c.within("TRCMLE MAD", t.mad, 0.287, 0.06);
        c.between("TRCMLE RP", t.rejection_rate, 0.02, 0.09);
        let two = r.row("2SCMLE").unwrap();
        c.within("2SCMLE Med.Bias", two.median_bias, -0.559, 0.10);
        c.between("2SCMLE RP", two.rejection_rate, 0.70, 1.0);
        c.within("Probit Med.Bias", r.row("Probit").unwrap().median_bias, -0.729, 0.05);
    }
    let secs = start.elapsed().as_secs_f64();
    c.require(secs <= 900.0, format!("runtime {secs:.0}s"));
    c.done()
}

fn table_gaussian_mu60() -> Outcome {
    let mut c = Check::new();
    if let Some(r) = monte_carlo(ScenarioConfig::gaussian(200, 0.2, 60.0), &[BuiltinEstimator::Trcmle], &mut c) {
        let t = r.row("TRCMLE").unwrap();
        c.within("TRCMLE Med.Bias", t.median_bias, 0.042, 0.10);
        c.within("TRCMLE MAD", t.mad, 0.221, 0.05);
    }
    c.done()
}

fn table_factor() -> Outcome {
    let mut c = Check::new();
    let suite = [BuiltinEstimator::TwoScmle, BuiltinEstimator::Trcmle, BuiltinEstimator::Scrcmle];
    if let Some(r) = monte_carlo(ScenarioConfig::factor(200, 30.0), &suite, &mut c) {
        c.within("2SCMLE Med.Bias", r.row("2SCMLE").unwrap().median_bias, -0.637, 0.12);
        c.within("TRCMLE Med.Bias", r.row("TRCMLE").unwrap().median_bias, 0.0, 0.20);
        c.between("SCRCMLE RP", r.row("SCRCMLE").unwrap().rejection_rate, 0.015, 0.09);
    }
    c.done()
}

fn table_functional() -> Outcome {
    let mut c = Check::new();
    let suite = [BuiltinEstimator::Scrcmle, BuiltinEstimator::Probit];
    if let Some(r) = monte_carlo(ScenarioConfig::functional(200, 60.0), &suite, &mut c) {
        let s = r.row("SCRCMLE").unwrap();
        c.within("SCRCMLE Med.Bias", s.median_bias, 0.0, 0.12);
        c.between("SCRCMLE RP", s.rejection_rate, 0.02, 0.10);
        c.within("Probit Med.Bias", r.row("Probit").unwrap().median_bias, -0.753, 0.06);
    }
    c.done()
}

fn oracle_equivalence() -> Outcome {
    let mut c = Check::new();
    let opts = FitOptions::default();
    let (mut coef_gap, mut pi_gap) = (0.0f64, 0.0f64);
    for seed in 0..20 {
        let data = strong_dataset(500, 3, 0.6, 1000 + seed);
        let z = data.instruments.center().unwrap();
        let eig = covariance_eigensystem(&z).unwrap();
        let fs = fit_first_stage(&data.y2, &eig, &FilterScheme::tikhonov(1e-10).unwrap(), &data.endog_mask).unwrap();
        let rc = fit_rcmle(&data.y, &data.y2, &fs, &opts).unwrap();
        let design = data.linear_design.as_ref().unwrap();
        let two = fit_2scmle(&data.y, &data.y2, design, &data.endog_mask, &opts).unwrap();
        coef_gap = coef_gap.max((rc.coefficients() - two.second.coefficients()).amax());

        let zc = z.values();
        let y2 = data.y2.column(0).into_owned();
        let y2c = y2.add_scalar(-y2.mean());
        let ols = (zc.transpose() * zc).try_inverse().unwrap() * zc.transpose() * y2c;
        pi_gap = pi_gap.max((fs.representers(&eig).column(0) - ols).amax());
    }
    c.below("max |RCMLE − 2SCMLE|", coef_gap, 1e-4);
    c.below("max |Π̂ − OLS|", pi_gap, 1e-6);
    c.done()
}

fn central_difference(f: &dyn Fn(&DVector<f64>) -> DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
    let h = 1e-6;
    let p = theta.len();
    let m = f(theta).len();
    let mut out = DMatrix::zeros(m, p);
    for k in 0..p {
        let mut up = theta.clone();
        let mut dn = theta.clone();
        up[k] += h;
        dn[k] -= h;
        out.set_column(k, &((f(&up) - f(&dn)) / (2.0 * h)));
    }
    out
}

fn relative(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.amax().max(b.amax());
    if scale == 0.0 { 0.0 } else { (a - b).amax() / scale }
}

fn derivative_check() -> Outcome {
    let mut c = Check::new();
    let mut worst = [0.0f64; 4];
    for inst in 0..100u64 {
        let mut r = rng(50_000 + inst);
        let n = r.random_range(30..300);
        let p = r.random_range(1..7);
        let x = normal_matrix(&mut r, n, p);
        let truth = normal_vector(&mut r, p) * 0.7;
        let index = &x * &truth;
        let y = DVector::from_fn(n, |i, _| {
            let e: f64 = r.sample(StandardNormal);
            if index[i] + e >= 0.0 { 1.0 } else { 0.0 }
        });
        let theta = normal_vector(&mut r, p) * 0.5;

        let pr = probit_objective(&theta, &x, &y);
        let g = central_difference(&|t| DVector::from_element(1, probit_objective(t, &x, &y).value), &theta);
        let h = central_difference(&|t| probit_objective(t, &x, &y).gradient, &theta);
        worst[0] = worst[0].max(relative(&g.transpose(), &DMatrix::from_column_slice(p, 1, pr.gradient.as_slice())));
        worst[1] = worst[1].max(relative(&h, &pr.hessian));

        let nl = nls_objective(&theta, &x, &y);
        let g = central_difference(&|t| DVector::from_element(1, nls_objective(t, &x, &y).value), &theta);
        let h = central_difference(&|t| nls_objective(t, &x, &y).gradient, &theta);
        worst[2] = worst[2].max(relative(&g.transpose(), &DMatrix::from_column_slice(p, 1, nl.gradient.as_slice())));
        worst[3] = worst[3].max(relative(&h, &nl.hessian));
    }
    c.below("probit score", worst[0], 1e-6);
    c.below("probit curvature", worst[1], 1e-6);
    c.below("NLS score", worst[2], 1e-6);
    c.below("NLS curvature", worst[3], 1e-6);
    c.done()
}

/// Dense `n × n` hat matrix `Z̃ [Σ_j q(κ_j)/κ_j φ_j φ_j'] Z̃' / n` with `Z̃ = Z diag(√w)`.
fn dense_hat(z: &DMatrix<f64>, weights: &DVector<f64>, scheme: &FilterScheme) -> DMatrix<f64> {
    let n = z.nrows() as f64;
    let zw = z * DMatrix::from_diagonal(&weights.map(f64::sqrt));
    let k = zw.transpose() * &zw / n;
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
    &zw * m * zw.transpose() / n
}

fn operator_identities() -> Outcome {
    let mut c = Check::new();
    let opts = FitOptions::default();
    let schemes = [
        FilterScheme::tikhonov(0.05).unwrap(),
        FilterScheme::spectral_cutoff(0.3).unwrap(),
        FilterScheme::ridge(0.2).unwrap(),
    ];
    let (mut traces, mut cp, mut j2_err, mut congruence) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for seed in 0..8u64 {
        let mut r = rng(70_000 + seed);
        let n = r.random_range(20..=50);
        // Euclidean and weighted-grid instrument spaces.
        let (values, space) = if seed % 2 == 0 {
            (normal_matrix(&mut r, n, 8), InstrumentSpace::euclidean(8).unwrap())
        } else {
            (normal_matrix(&mut r, n, 12), InstrumentSpace::normal_weighted_grid(-3.0, 3.0, 12).unwrap())
        };
        let weights = space.quadrature_weights();
        let z = InstrumentSample::new(values, space).unwrap().center().unwrap();
        let eig = covariance_eigensystem(&z).unwrap();
        let w = normal_vector(&mut r, n);
        for scheme in &schemes {
            let p = dense_hat(z.values(), &weights, scheme);
            let t = hat_traces(&eig, scheme);
            traces = traces.max((t.trace - p.trace()).abs()).max((t.trace_sq - (&p * &p).trace()).abs());
            let resid = &w - &p * &w;
            let sigma2 = pilot_variance(&w, &eig, scheme);
            let dense_sigma2 = resid.norm_squared() / (n as f64 - p.trace()).max(1.0);
            let dense_cp = resid.norm_squared() / n as f64 + 2.0 * dense_sigma2 * p.trace() / n as f64;
            cp = cp.max((mallows_cp(&w, &eig, scheme, sigma2).unwrap() - dense_cp).abs()).max((sigma2 - dense_sigma2).abs());
        }

        let data = strong_dataset(45, 5, 0.6, 80_000 + seed);
        let z = data.instruments.center().unwrap();
        let eig = covariance_eigensystem(&z).unwrap();
        let ones = DVector::from_element(5, 1.0);
        for scheme in &schemes {
            let fs = fit_first_stage(&data.y2, &eig, scheme, &data.endog_mask).unwrap();
            for nls in [false, true] {
                let fit = if nls {
                    fit_rnlse(&data.y, &data.y2, &fs, &opts).unwrap()
                } else {
                    fit_rcmle(&data.y, &data.y2, &fs, &opts).unwrap()
                };
                let var = estimate_vcov(&fit, &data.y, &data.y2, &fs, &eig).unwrap();
                let v = fs.v_hat_endog();
                let g = hstack(&fs.gamma_hat, &v);
                let index = hstack(&data.y2, &v) * fit.coefficients();
                let m2 = DVector::from_fn(45, |i, _| {
                    let (cdf, pdf) = (normal::cdf(index[i]), normal::pdf(index[i]));
                    if nls { pdf * pdf } else { ((data.y[i] - cdf) * pdf / (cdf * (1.0 - cdf))).powi(2) }
                });
                let m = DMatrix::from_diagonal(&m2);
                let sigma2 = (&v * DVector::from_column_slice(&fit.psi_hat)).norm_squared() / 45.0;
                let p = dense_hat(z.values(), &ones, scheme);
                let dense = g.transpose() * &m * &p * &p * &m * &g * (sigma2 / 45.0);
                j2_err = j2_err.max(relative(&var.j2, &dense));
                let tmap = &var.transform;
                congruence = congruence.max(relative(&(tmap * &var.vcov_bp * tmap.transpose()), &var.vcov_paper()));
            }
        }
    }
    c.below("hat traces", traces, 1e-10);
    c.below("Mallows Cp", cp, 1e-10);
    c.below("Ĵ₂ relative", j2_err, 1e-10);
    c.below("T·vcov_bp·T′ vs Ŵ/n relative", congruence, 1e-10);
    c.done()
}

fn size_checks() -> Outcome {
    let mut c = Check::new();
    let cfg = strong_config(500, 3, 0.6).with_reps(1000).with_seed(31);
    match run_builtin(&cfg, &[BuiltinEstimator::Trcmle], AlphaPolicy::Auto) {
        Ok(r) => c.within("Wald β₁ = 1 rejection", r.row("TRCMLE").unwrap().rejection_rate, 0.05, 0.02),
        Err(e) => c.require(false, format!("experiment failed: {e}")),
    }
    let rejections: Vec<Option<bool>> = (0..1000u64)
        .into_par_iter()
        .map(|rep| {
            let cfg = strong_config(500, 3, 0.0).with_seed(41);
            let data = generate(&cfg, &fixed_draws(&cfg), rep).ok()?;
            let z = data.instruments.center().ok()?;
            let eig = covariance_eigensystem(&z).ok()?;
            let sel = regcf::alpha_select::auto_alpha(&data.y2, &eig, regcf::FilterKind::Tikhonov, &data.endog_mask).ok()?;
            let fs = fit_first_stage(&data.y2, &eig, &FilterScheme::tikhonov(sel.alpha).ok()?, &data.endog_mask).ok()?;
            let fit = fit_rcmle(&data.y, &data.y2, &fs, &FitOptions::default()).ok()?;
            let var = estimate_vcov(&fit, &data.y, &data.y2, &fs, &eig).ok()?;
            Some(exogeneity_test(&fit, &var).ok()?.p < 0.05)
        })
        .collect();
    let ok: Vec<bool> = rejections.into_iter().flatten().collect();
    c.require(ok.len() >= 990, format!("{} of 1000 fits usable", ok.len()));
    let rate = ok.iter().filter(|&&b| b).count() as f64 / ok.len().max(1) as f64;
    c.within("exogeneity rejection at ρ = 0", rate, 0.05, 0.02);
    c.done()
}

fn asf_ape_identity() -> Outcome {
    let mut c = Check::new();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let data = strong_dataset(300, 4, 0.6, 90_000 + seed);
        let z = data.instruments.center().unwrap();
        let eig = covariance_eigensystem(&z).unwrap();
        let fs = fit_first_stage(&data.y2, &eig, &FilterScheme::tikhonov(0.02).unwrap(), &data.endog_mask).unwrap();
        let fit = fit_rcmle(&data.y, &data.y2, &fs, &FitOptions::default()).unwrap();
        let control = fs.v_hat_endog();
        let points = DMatrix::from_fn(25, 2, |i, k| if k == 0 { -2.4 + 0.2 * i as f64 } else { 0.5 - 0.04 * i as f64 });
        let effects = ape(&fit, &control, &points).unwrap();
        for k in 0..2 {
            let mut up = points.clone();
            let mut dn = points.clone();
            up.column_mut(k).add_scalar_mut(h);
            dn.column_mut(k).add_scalar_mut(-h);
            let fd = (asf(&fit, &control, &up).unwrap() - asf(&fit, &control, &dn).unwrap()) / (2.0 * h);
            worst = worst.max((fd - effects.column(k)).amax());
        }
    }
    c.below("max |ΔASF/Δy₂ − APE|", worst, 1e-8);
    c.done()
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("Gaussian design, μ² = 30", table_gaussian_mu30),
        ("Gaussian design, μ² = 60", table_gaussian_mu60),
        ("factor design, μ² = 30", table_factor),
        ("functional design, μ² = 60", table_functional),
        ("RCMLE at α → 0 equals 2SCMLE", oracle_equivalence),
        ("objective derivatives", derivative_check),
        ("operator identities", operator_identities),
        ("test size", size_checks),
        ("ASF/APE identity", asf_ape_identity),
    ];
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let out = run();
        let status = if out.pass { "PASS" } else { "FAIL" };
        if !out.pass {
            failed += 1;
        }
        println!("criterion {}: {status} {name} ({:.1}s): {}", k + 1, start.elapsed().as_secs_f64(), out.detail);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
