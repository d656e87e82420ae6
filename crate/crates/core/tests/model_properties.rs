use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use resilience_core::elliott::{elliott_prob, fit_bivariate_meta, MetaFit, StudyEffects};
use resilience_core::gp_likelihood::pooled_neg_loglik;
use resilience_core::inference::{bootstrap_inference, pab_from_fits, BootstrapOptions};
use resilience_core::kernel::cholesky_cov;
use resilience_core::mle::{fit_group, fit_with_configs};
use resilience_core::sim_harness::{generate_dataset, run_simulation, SimConfig, SimSetting};
use resilience_core::spline_basis::design_matrix;
use resilience_core::{
    BasisConfig, BasisSpec, EstimateMethod, FitOptions, FittedGroupModel, Group, GroupParams, KernelParams, StudyData,
};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Studies whose control arm follows `B(s) beta + GP` exactly.
fn in_class_studies(spec: &BasisSpec, params: &GroupParams, k: usize, n: usize, seed: u64) -> Vec<StudyData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|i| {
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
            let b = design_matrix(spec, &s);
            let mean = &b * DVector::from_column_slice(&params.beta);
            let (chol, _) = cholesky_cov(&s, &params.kernel).unwrap();
            let z = DVector::from_fn(n, |_, _| normal(&mut rng));
            let y = mean + chol.l() * z;
            StudyData::new(format!("s{i}"), s.clone(), y.as_slice().to_vec(), s, y.as_slice().to_vec()).unwrap()
        })
        .collect()
}

#[test]
fn likelihood_peaks_near_generating_parameters() {
    let spec = BasisSpec::new(3, vec![2.5, 5.0, 7.5], (0.0, 10.0)).unwrap();
    let truth = GroupParams {
        beta: vec![1.0, 0.0, 2.0, -1.0, 0.5, 1.5, 3.0],
        kernel: KernelParams::new(1.0, 1.5, 0.5).unwrap(),
    };
    let studies = in_class_studies(&spec, &truth, 30, 40, 17);
    let at_truth = pooled_neg_loglik(&studies, Group::Control, &spec, &truth).unwrap();
    for factor in [0.6, 1.6] {
        for which in 0..3 {
            let mut k = truth.kernel;
            match which {
                0 => k.sigma2 *= factor,
                1 => k.theta *= factor,
                _ => k.v2 *= factor,
            }
            let other = GroupParams {
                kernel: k,
                ..truth.clone()
            };
            let nll = pooled_neg_loglik(&studies, Group::Control, &spec, &other).unwrap();
            assert!(nll > at_truth, "parameter {which} x{factor}: {nll} <= {at_truth}");
        }
    }
    let mut shifted = truth.clone();
    shifted.beta[3] += 1.0;
    assert!(pooled_neg_loglik(&studies, Group::Control, &spec, &shifted).unwrap() > at_truth);

    let fit = fit_group(&studies, Group::Control, &spec, &FitOptions::default()).unwrap();
    assert!(fit.final_neg_loglik <= at_truth + 1e-6);
    let k = fit.params.kernel;
    assert!((k.v2 / 0.5 - 1.0).abs() < 0.2, "v2 {}", k.v2);
    assert!((k.theta / 1.5 - 1.0).abs() < 0.5, "theta {}", k.theta);
}

#[test]
fn mean_coefficients_match_least_squares_without_functional_noise() {
    let spec = BasisSpec::new(3, vec![3.0, 6.0], (0.0, 10.0)).unwrap();
    let beta = [0.5, -1.0, 2.0, 0.0, 1.0, 2.5];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let studies: Vec<StudyData> = (0..8)
        .map(|i| {
            let s: Vec<f64> = (0..60).map(|_| rng.random_range(0.0..10.0)).collect();
            let b = design_matrix(&spec, &s);
            let y: Vec<f64> = (&b * DVector::from_column_slice(&beta))
                .iter()
                .map(|m| m + 0.3 * normal(&mut rng))
                .collect();
            StudyData::new(format!("s{i}"), s.clone(), y.clone(), s, y).unwrap()
        })
        .collect();

    let s: Vec<f64> = studies.iter().flat_map(|st| st.s0.clone()).collect();
    let y: Vec<f64> = studies.iter().flat_map(|st| st.y0.clone()).collect();
    let x = design_matrix(&spec, &s);
    let xtx = x.transpose() * &x;
    let ols = xtx.cholesky().unwrap().solve(&(x.transpose() * DVector::from_vec(y)));

    let fit = fit_group(&studies, Group::Control, &spec, &FitOptions::default()).unwrap();
    for (b, o) in fit.params.beta.iter().zip(ols.iter()) {
        assert!((b - o).abs() < 0.05, "beta {b} vs projection {o}");
    }
    assert!((fit.params.kernel.v2 / 0.09 - 1.0).abs() < 0.15, "{fit:?}");
}

#[test]
fn simulation_independent_of_thread_count() {
    let mut cfg = SimConfig::new(1, 3, 20, 3, 21);
    cfg.truth_mc = 1000;
    cfg.fit.n_restarts = 2;
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let many = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = one.install(|| run_simulation(&cfg)).unwrap();
    let b = many.install(|| run_simulation(&cfg)).unwrap();
    // NaN summary fields compare unequal, so compare the printed form
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
}

#[test]
fn pab_falls_back_to_bootstrap_on_singular_hessian() {
    let setting = SimSetting::get(1).unwrap();
    let data = generate_dataset(&setting, 4, 20, 8).unwrap();
    let basis = BasisConfig::linear();
    let opts = BootstrapOptions {
        replicates: 12,
        seed: 99,
        gradient_j: 200,
        refit_options: FitOptions {
            n_restarts: 1,
            ..FitOptions::default()
        },
        ..BootstrapOptions::default()
    };
    let (m0, m1) = fit_with_configs(&data.studies, basis, basis, &opts.refit_options).unwrap();

    // an extra basis function supported only beyond every observed surrogate
    let s_max = data
        .studies
        .iter()
        .flat_map(|st| st.s0.iter().chain(&st.s1))
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let widen = |m: &FittedGroupModel| {
        let spec = BasisSpec::new(1, vec![s_max + 1.0], (m.spec.boundary_knots.0, s_max + 2.0)).unwrap();
        let mut beta = m.params.beta.clone();
        beta.push(0.0);
        FittedGroupModel {
            spec,
            params: GroupParams { beta, ..m.params.clone() },
            ..m.clone()
        }
    };
    let (w0, w1) = (widen(&m0), widen(&m1));
    let (est, diag) = pab_from_fits(&data.studies, &data.new_study, [basis; 2], [&w0, &w1], 200, &opts).unwrap();
    assert!(diag.fell_back);
    assert_eq!(est.method, EstimateMethod::PabFallbackBootstrap);

    let boot = bootstrap_inference(&data.studies, &data.new_study, basis, basis, 200, &opts).unwrap();
    assert_eq!(est.p_hat, boot.p_hat);
    assert_eq!(est.se, boot.se);
    assert_eq!(est.ci, boot.ci);
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    if b <= a {
        return 0.0;
    }
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut total = f(a) + f(b);
    for i in 1..n {
        total += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    total * h / 3.0
}

#[test]
fn comparator_probability_matches_quadrature_of_joint_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..20 {
        let sa: f64 = rng.random_range(0.2..2.0);
        let sb: f64 = rng.random_range(0.2..2.0);
        let rho: f64 = rng.random_range(-0.9..0.9);
        let fit = MetaFit {
            beta_s: rng.random_range(-1.0..1.0),
            beta_y: rng.random_range(-1.0..1.0),
            d_aa: sa * sa,
            d_ab: rho * sa * sb,
            d_bb: sb * sb,
            neg_loglik: 0.0,
        };
        let d = fit.beta_s + rng.random_range(-2.0..2.0) * sa;
        let det = fit.d_aa * fit.d_bb - fit.d_ab * fit.d_ab;
        let density = |y: f64| {
            let (u, v) = (d - fit.beta_s, y - fit.beta_y);
            let q = (fit.d_bb * u * u - 2.0 * fit.d_ab * u * v + fit.d_aa * v * v) / det;
            (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
        };
        let lo = fit.beta_y - 14.0 * sb;
        let hi = fit.beta_y + 14.0 * sb;
        let num = simpson(density, lo, hi.min(0.0), 40_000);
        let den = simpson(density, lo, hi, 40_000);
        let oracle = num / den;
        let p = elliott_prob(&fit, d).unwrap();
        assert!((p - oracle).abs() < 1e-6, "{p} vs {oracle}");
    }
}

#[test]
fn comparator_recovers_parameters_with_many_studies() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 0.8]);
    let l = d.clone().cholesky().unwrap().l();
    let w = [[0.05, 0.01], [0.01, 0.04]];
    let wl = DMatrix::from_row_slice(2, 2, &[w[0][0], w[0][1], w[1][0], w[1][1]]).cholesky().unwrap().l();
    let effects: Vec<StudyEffects> = (0..200)
        .map(|_| {
            let b = &l * DVector::from_fn(2, |_, _| normal(&mut rng));
            let e = &wl * DVector::from_fn(2, |_, _| normal(&mut rng));
            StudyEffects {
                delta_s: 1.0 + b[0] + e[0],
                delta_y: 0.5 + b[1] + e[1],
                within_cov: w,
            }
        })
        .collect();
    let fit = fit_bivariate_meta(&effects).unwrap();
    assert!((fit.beta_s - 1.0).abs() < 0.2, "{fit:?}");
    assert!((fit.beta_y - 0.5).abs() < 0.2, "{fit:?}");
    assert!((fit.d_aa - 1.0).abs() < 0.3, "{fit:?}");
    assert!((fit.d_ab - 0.6).abs() < 0.25, "{fit:?}");
    assert!((fit.d_bb - 0.8).abs() < 0.25, "{fit:?}");
}
