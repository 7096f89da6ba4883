mod common;

use common::rng;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use regcf::simlab::{
    asf_curves, beta25_density, concentration, fixed_draws, generate, mad, median, median_bias, run_builtin,
    run_monte_carlo, solve_cstar, true_asf, AlphaPolicy, BuiltinEstimator, ConstantEstimator, Estimate, McEstimator,
    ReplicationContext, ScenarioConfig,
};
use regcf::{covariance_eigensystem, normal, Error, InstrumentSample, InstrumentSpace};

fn covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    let means = x.row_mean();
    let centered = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - means[j]);
    centered.transpose() * &centered / n
}

fn corr(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let m = DMatrix::from_columns(&[a.clone(), b.clone()]);
    let c = covariance(&m);
    c[(0, 1)] / (c[(0, 0)] * c[(1, 1)]).sqrt()
}

#[test]
fn gaussian_design_moments() {
    let cfg = ScenarioConfig::gaussian(100_000, 0.2, 30.0).with_seed(5);
    let data = generate(&cfg, &fixed_draws(&cfg), 0).unwrap();
    let r = corr(&data.u, &data.v);
    let se = (1.0 - 0.36) / (100_000f64).sqrt();
    assert!((r + 0.6).abs() < 3.0 * se, "corr(u, v) = {r}");

    let y2 = data.y2.column(0).into_owned();
    let var = y2.variance();
    assert!((var - 1.0).abs() < 0.02, "Var(y₂) = {var}");
    assert!((data.u.variance() - 1.0 / 0.64).abs() < 0.03);
    assert!((data.truth.psi0 + 0.6 * data.truth.sigma1 / data.truth.sigma2).abs() < 1e-15);
    assert_eq!(data.infeasible_design.ncols(), 10);
    assert_eq!(cfg.mu2 / cfg.relevant() as f64, 3.0);

    let sigma_z = cfg.sigma_z();
    let cov = covariance(data.instruments.values());
    assert!((cov - &sigma_z).norm() / sigma_z.norm() < 0.02);
}

#[test]
fn factor_design_covariance() {
    let cfg = ScenarioConfig::factor(100_000, 30.0).with_seed(8);
    let fixed = fixed_draws(&cfg);
    let m = fixed.loadings.clone().unwrap();
    assert_eq!(m.shape(), (100, 5));
    assert!(m.iter().all(|v| (-1.0..=1.0).contains(v)));
    let data = generate(&cfg, &fixed, 0).unwrap();
    let z_tilde = data.instruments.values().columns(0, 100).into_owned();
    let target = &m * cfg.sigma_z() * m.transpose() + DMatrix::identity(100, 100) * 0.09;
    let err = (covariance(&z_tilde) - &target).norm() / target.norm();
    assert!(err < 0.05, "{err}");
    let signal = &m * cfg.sigma_z() * m.transpose();
    assert_eq!(signal.rank(1e-9 * signal.norm()), 5);
}

#[test]
fn factor_design_without_noise_is_exact() {
    let cfg = ScenarioConfig { sigma_tilde: 0.0, ..ScenarioConfig::factor(300, 30.0) };
    let fixed = fixed_draws(&cfg);
    let data = generate(&cfg, &fixed, 3).unwrap();
    let z_tilde = data.instruments.values().columns(0, 100).into_owned();
    let exact = &data.infeasible_design * fixed.loadings.unwrap().transpose();
    assert!((z_tilde - exact).amax() < 1e-12);
    assert_eq!(data.instruments.values().column(100), data.y2.column(1));
}

#[test]
fn functional_design_shape() {
    let cfg = ScenarioConfig::functional(400, 60.0).with_seed(2);
    let data = generate(&cfg, &fixed_draws(&cfg), 0).unwrap();
    let values = data.instruments.values();
    assert_eq!(values.ncols(), 101);
    let curves = values.columns(0, 100).into_owned();
    let (lo, hi) = ((-5.0f64).exp(), 5.0f64.exp());
    assert!(curves.iter().all(|&v| v >= lo * (1.0 - 1e-12) && v <= hi * (1.0 + 1e-12)));

    let space = InstrumentSpace::normal_weighted_grid(-5.0, 5.0, 100).unwrap();
    let sample = InstrumentSample::new(curves, space).unwrap().center().unwrap();
    let eig = covariance_eigensystem(&sample).unwrap();
    assert!(eig.eigenvalues[4] / eig.eigenvalues[0] < 1e-2);

    // f(z₂) in the infeasible design is the Beta(2, 5) density.
    assert!(data.infeasible_design.column(1).iter().all(|&f| f >= 0.0));
    let y2 = data.y2.column(0).into_owned();
    assert!(y2.mean().abs() < 4.0 / (400f64).sqrt());
}

#[test]
fn beta_density_integrates_to_one() {
    let m = 20_000;
    let h = 1.0 / m as f64;
    let total: f64 = (0..m).map(|k| beta25_density((k as f64 + 0.5) * h) * h).sum();
    assert!((total - 1.0).abs() < 1e-8);
    let mean: f64 = (0..m).map(|k| { let x = (k as f64 + 0.5) * h; x * beta25_density(x) * h }).sum();
    assert!((mean - 2.0 / 7.0).abs() < 1e-8);
}

#[test]
fn true_asf_matches_quadrature() {
    let cfg = ScenarioConfig::gaussian(200, 0.2, 30.0);
    let data = generate(&cfg, &fixed_draws(&cfg), 0).unwrap();
    let t = &data.truth;
    // Composite Simpson over ±12 standard deviations of v.
    let m = 4000;
    let (a, b) = (-12.0 * t.sigma2, 12.0 * t.sigma2);
    let h = (b - a) / m as f64;
    for &(y2, z1) in &[(-1.5, 0.0), (0.0, 0.0), (0.7, 0.3), (2.0, -1.0)] {
        let index = y2 * t.beta[0] + z1 * t.beta[1];
        let f = |v: f64| normal::cdf(index + t.psi0 * v) * normal::pdf(v / t.sigma2) / t.sigma2;
        let mut s = f(a) + f(b);
        for k in 1..m {
            s += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        let quad = s * h / 3.0;
        assert!((quad - true_asf(t, y2, z1)).abs() < 1e-10);
    }
}

#[test]
fn metric_reference_values() {
    assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    assert_eq!(median_bias(&[-1.0, 0.5, 2.0, 0.0]), 0.25);
    assert_eq!(mad(&[1.0, 2.0, 3.0, 4.0, 100.0]), 1.0);
    assert_eq!(mad(&[1.0, 1.0, 1.0, 1.0]), 0.0);
}

#[test]
fn constant_estimator_has_zero_metrics() {
    let cfg = ScenarioConfig::gaussian(100, 0.2, 30.0).with_reps(40);
    let suite: Vec<Box<dyn McEstimator>> = vec![Box::new(ConstantEstimator { value: 1.0, se: 1.0 })];
    let report = run_monte_carlo(&cfg, &suite, AlphaPolicy::Auto).unwrap();
    let row = report.row("Constant").unwrap();
    assert_eq!((row.median_bias, row.mad, row.rejection_rate), (0.0, 0.0, 0.0));
    assert_eq!((row.successes, row.failures), (40, 0));
    assert_eq!(report.replications.len(), 40);
    assert!(report.replications.windows(2).all(|w| w[0].rep < w[1].rep));
}

struct Flaky {
    share: f64,
}

impl McEstimator for Flaky {
    fn name(&self) -> String {
        "Flaky".into()
    }

    fn estimate(&self, ctx: &ReplicationContext) -> regcf::Result<Estimate> {
        if normal::cdf(ctx.data.v[0]) < self.share {
            Err(Error::Separation { iterations: 0, detail: "test".into() })
        } else {
            Ok(Estimate { beta1: 1.0, se: 1.0, target: 1.0, model: None })
        }
    }
}

#[test]
fn failure_rule() {
    let cfg = ScenarioConfig::gaussian(100, 0.2, 30.0).with_reps(200);
    let few: Vec<Box<dyn McEstimator>> = vec![Box::new(Flaky { share: 0.1 })];
    let report = run_monte_carlo(&cfg, &few, AlphaPolicy::Auto).unwrap();
    let row = report.row("Flaky").unwrap();
    assert!(row.failures > 0 && row.failures + row.successes == 200);
    let many: Vec<Box<dyn McEstimator>> = vec![Box::new(Flaky { share: 0.5 })];
    assert!(matches!(run_monte_carlo(&cfg, &many, AlphaPolicy::Auto), Err(Error::ExperimentFailed { .. })));
    let empty: Vec<Box<dyn McEstimator>> = vec![];
    assert!(run_monte_carlo(&cfg, &empty, AlphaPolicy::Auto).is_err());
}

fn report_json(threads: usize) -> String {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let cfg = ScenarioConfig::gaussian(150, 0.2, 30.0).with_reps(24).with_seed(77);
        run_builtin(&cfg, &BuiltinEstimator::table_suite(), AlphaPolicy::Auto).unwrap().to_json().unwrap()
    })
}

#[test]
fn reports_do_not_depend_on_thread_count() {
    let one = report_json(1);
    assert_eq!(one, report_json(4));
    assert_eq!(one, report_json(3));
}

#[test]
fn replications_use_independent_streams() {
    let cfg = ScenarioConfig::gaussian(50, 0.2, 30.0);
    let fixed = fixed_draws(&cfg);
    let a = generate(&cfg, &fixed, 0).unwrap();
    let b = generate(&cfg, &fixed, 1).unwrap();
    assert_ne!(a.y2, b.y2);
    assert_eq!(a.y2, generate(&cfg, &fixed, 0).unwrap().y2);
    let other = generate(&cfg.clone().with_seed(cfg.base_seed + 1), &fixed, 0).unwrap();
    assert_ne!(a.y2, other.y2);
}

#[test]
fn estimated_asf_tracks_the_truth_in_strong_design() {
    let cfg = common::strong_config(800, 3, 0.6).with_reps(40).with_seed(12);
    let curves = asf_curves(&cfg, &[BuiltinEstimator::Trcmle, BuiltinEstimator::Probit], AlphaPolicy::Auto, 15).unwrap();
    assert_eq!(curves.y2.len(), 15);
    let cf_gap = curves.estimates[0].iter().zip(&curves.truth).map(|(e, t)| (e - t).abs()).fold(0.0, f64::max);
    let probit_gap = curves.estimates[1].iter().zip(&curves.truth).map(|(e, t)| (e - t).abs()).fold(0.0, f64::max);
    assert!(cf_gap < 0.03, "{cf_gap}");
    assert!(probit_gap > cf_gap);
    let mut out = Vec::new();
    curves.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.starts_with("y2,asf_TRCMLE,asf_Probit,asf_true\n"));
    assert_eq!(text.lines().count(), 16);
}

#[test]
fn report_tables() {
    let cfg = ScenarioConfig::gaussian(120, 0.2, 30.0).with_reps(10);
    let report = run_builtin(&cfg, &BuiltinEstimator::table_suite(), AlphaPolicy::Auto).unwrap();
    let mut out = Vec::new();
    report.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), 7);
    for name in ["TRCMLE", "SCRCMLE", "Inf.2SCMLE", "2SCMLE", "Probit", "TTSLS"] {
        assert!(report.row(name).is_some());
    }
    let parsed: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    assert_eq!(parsed["rows"].as_array().unwrap().len(), 6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn cstar_round_trip(seed in any::<u64>(), k in 1usize..20, n in 50usize..2000, mu2 in 0.1f64..200.0, rho_z in -0.9f64..0.9) {
        let mut r = rng(seed);
        let sigma_z = DMatrix::from_fn(k, k, |i, j| 0.5 * rho_z.powi((i as i32 - j as i32).abs()));
        let pi_tilde = DVector::from_fn(k, |_, _| r.random_range(0.0..1.0) + 0.05);
        let c = solve_cstar(mu2, n, &pi_tilde, &sigma_z).unwrap();
        prop_assert!(c > 0.0);
        let mu = concentration(n, &(pi_tilde * c), &sigma_z);
        prop_assert!((mu - mu2).abs() < 1e-10 * mu2.max(1.0));
    }
}
