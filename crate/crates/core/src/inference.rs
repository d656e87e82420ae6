//! Standard errors and confidence intervals for the resilience probability.
//!
//! Two procedures:
//! * the fully nonparametric bootstrap, which resamples studies, refits
//!   both arms, resamples the new study's surrogates and recomputes `p_hat`;
//! * the partially analytic bootstrap (PAB), which adds a delta-method term
//!   for the fitted parameters (inverse numerical Hessian of the negative
//!   log-likelihood, numerical gradient of `p_hat`) to a bootstrap over the
//!   new study's surrogates with the parameters held fixed.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::gp_likelihood::{Group, GroupParams, NewStudySurrogates, PreparedGroup, StudyData};
use crate::kernel::KernelParams;
use crate::mle::{fit_prepared, fit_with_configs, FitOptions, FittedGroupModel};
use crate::parallel::par_map;
use crate::resilience::{estimate_resilience, EstimateMethod, ResilienceEstimate, ResilienceEvaluator};
use crate::rng::{derive_seed, stream, tag};
use crate::spline_basis::BasisConfig;
use crate::stats::{mean, quantile, sample_sd, sample_variance};

/// Largest Hessian condition number PAB accepts before falling back.
pub const MAX_HESSIAN_COND: f64 = 1e12;
/// Fraction of failed bootstrap replicates that aborts the procedure.
pub const MAX_FAILED_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOptions {
    #[serde(rename = "R")]
    pub replicates: usize,
    pub ci_level: f64,
    pub seed: u64,
    /// Options for every refit inside the procedure, including the fit of
    /// the original data.
    pub refit_options: FitOptions,
    /// Synthetic draws per `p_hat` evaluation inside the PAB gradient.
    pub gradient_j: usize,
    /// Relative step of the log-likelihood Hessian.
    pub hessian_step: f64,
    /// Relative step of the `p_hat` gradient.
    pub gradient_step: f64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            replicates: 200,
            ci_level: 0.95,
            seed: 0,
            refit_options: FitOptions::default(),
            gradient_j: 5000,
            hessian_step: 1e-4,
            gradient_step: 5e-3,
        }
    }
}

impl BootstrapOptions {
    fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::InvalidInput("at least 2 bootstrap replicates are needed".into()));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::InvalidInput("ci_level must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PabDiagnostics {
    pub hessian_cond: f64,
    pub grad_norm: f64,
    pub var_param: f64,
    pub var_sb: f64,
    pub fell_back: bool,
}

/// Replicate-level output of the nonparametric bootstrap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub estimate: ResilienceEstimate,
    pub replicates: Vec<f64>,
    pub n_failed: usize,
}

/// Central second differences with step `h * max(1, |x_i|)`, symmetrized.
pub fn numerical_hessian(f: impl Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Result<DMatrix<f64>> {
    let n = at.len();
    let steps: Vec<f64> = at.iter().map(|x| h * x.abs().max(1.0)).collect();
    let eval = |x: &[f64]| -> Result<f64> {
        let v = f(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteEvaluation(format!("{x:?}")))
        }
    };
    let shifted = |moves: &[(usize, f64)]| -> Vec<f64> {
        let mut x = at.to_vec();
        for &(i, d) in moves {
            x[i] += d;
        }
        x
    };
    let f0 = eval(at)?;
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        let hi = steps[i];
        let fp = eval(&shifted(&[(i, hi)]))?;
        let fm = eval(&shifted(&[(i, -hi)]))?;
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (hi * hi);
        for j in 0..i {
            let hj = steps[j];
            let fpp = eval(&shifted(&[(i, hi), (j, hj)]))?;
            let fpm = eval(&shifted(&[(i, hi), (j, -hj)]))?;
            let fmp = eval(&shifted(&[(i, -hi), (j, hj)]))?;
            let fmm = eval(&shifted(&[(i, -hi), (j, -hj)]))?;
            let v = (fpp - fpm - fmp + fmm) / (4.0 * hi * hj);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok((&hess + hess.transpose()) * 0.5)
}

/// Central differences with step `h * max(1, |x_i|)`.
pub fn numerical_gradient(g: impl Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut grad = Vec::with_capacity(at.len());
    let mut x = at.to_vec();
    for i in 0..at.len() {
        let step = h * at[i].abs().max(1.0);
        x[i] = at[i] + step;
        let up = g(&x);
        x[i] = at[i] - step;
        let down = g(&x);
        x[i] = at[i];
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFiniteEvaluation(format!("coordinate {i}")));
        }
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

/// Parameter vector `(beta, log sigma2, log theta, log v2)` of one arm.
pub fn params_to_vec(p: &GroupParams) -> Vec<f64> {
    let mut v = p.beta.clone();
    v.extend([p.kernel.sigma2.ln(), p.kernel.theta.ln(), p.kernel.v2.ln()]);
    v
}

pub fn vec_to_params(v: &[f64]) -> GroupParams {
    let l = v.len() - 3;
    GroupParams {
        beta: v[..l].to_vec(),
        kernel: KernelParams {
            sigma2: v[l].exp(),
            theta: v[l + 1].exp(),
            v2: v[l + 2].exp(),
        },
    }
}

fn resample<R: Rng>(values: &[f64], rng: &mut R) -> Vec<f64> {
    (0..values.len()).map(|_| values[rng.random_range(0..values.len())]).collect()
}

fn resample_new_study<R: Rng>(new: &NewStudySurrogates, rng: &mut R) -> NewStudySurrogates {
    NewStudySurrogates {
        s0: resample(&new.s0, rng),
        s1: resample(&new.s1, rng),
    }
}

fn percentile_ci(values: &[f64], level: f64) -> (f64, f64) {
    let a = (1.0 - level) / 2.0;
    (quantile(values, a), quantile(values, 1.0 - a))
}

/// One replicate: resample studies (as multiplicities), rebuild knots, refit
/// both arms from the original estimates, resample the new study, estimate.
fn bootstrap_replicate(
    studies: &[StudyData],
    new: &NewStudySurrogates,
    basis: [BasisConfig; 2],
    fits: [&FittedGroupModel; 2],
    j: usize,
    opts: &BootstrapOptions,
    r: usize,
) -> Result<f64> {
    let mut rng = stream(opts.seed, &[tag::BOOTSTRAP, r as u64]);
    let k = studies.len();
    let mut counts = vec![0usize; k];
    for _ in 0..k {
        counts[rng.random_range(0..k)] += 1;
    }
    let new_r = resample_new_study(new, &mut rng);
    let refit_opts = FitOptions {
        seed: derive_seed(opts.refit_options.seed, &[tag::BOOTSTRAP, r as u64]),
        ..opts.refit_options.clone()
    };
    let mut models = Vec::with_capacity(2);
    for g in Group::BOTH {
        let gi = g.index() as usize;
        let pooled: Vec<f64> = studies
            .iter()
            .zip(&counts)
            .flat_map(|(st, &c)| std::iter::repeat_n(st.group(g).0, c).flatten().copied())
            .collect();
        let spec = basis[gi].build(&pooled).map_err(|e| e.in_group(g.index()))?;
        let prepared = PreparedGroup::weighted(
            studies.iter().zip(&counts).filter(|(_, &c)| c > 0).map(|(st, &c)| (st, c as f64)),
            g,
            &spec,
        );
        let start = fits[gi].params.kernel;
        let m = fit_prepared(&prepared, &pooled, &spec, &refit_opts, Some(&start)).map_err(|e| e.in_group(g.index()))?;
        models.push(m);
    }
    let est = estimate_resilience(&models[0], &models[1], &new_r, j, derive_seed(opts.seed, &[tag::SYNTHETIC, r as u64]))?;
    Ok(est.p_hat)
}

fn bootstrap_from_fits(
    studies: &[StudyData],
    new: &NewStudySurrogates,
    basis: [BasisConfig; 2],
    fits: [&FittedGroupModel; 2],
    j: usize,
    opts: &BootstrapOptions,
) -> Result<BootstrapReport> {
    let point = estimate_resilience(fits[0], fits[1], new, j, opts.seed)?;
    let results = par_map(opts.replicates, |r| bootstrap_replicate(studies, new, basis, fits, j, opts, r));
    let total = results.len();
    let replicates: Vec<f64> = results
        .into_iter()
        .enumerate()
        .filter_map(|(r, res)| match res {
            Ok(p) => Some(p),
            Err(e) => {
                log::warn!("bootstrap replicate {r} failed: {e}");
                None
            }
        })
        .collect();
    let n_failed = total - replicates.len();
    if n_failed as f64 > MAX_FAILED_FRACTION * total as f64 || replicates.len() < 2 {
        return Err(Error::TooManyFailedReplicates { failed: n_failed, total });
    }
    let estimate = ResilienceEstimate {
        se: Some(sample_sd(&replicates)),
        ci: Some(percentile_ci(&replicates, opts.ci_level)),
        method: EstimateMethod::NonparametricBootstrap,
        ..point
    };
    Ok(BootstrapReport {
        estimate,
        replicates,
        n_failed,
    })
}

/// Fully nonparametric bootstrap with replicate-level detail.
pub fn bootstrap_report(
    studies: &[StudyData],
    new: &NewStudySurrogates,
    basis0: BasisConfig,
    basis1: BasisConfig,
    j: usize,
    opts: &BootstrapOptions,
) -> Result<BootstrapReport> {
    opts.validate()?;
    if studies.len() < 2 {
        return Err(Error::InvalidInput("the bootstrap needs at least 2 studies".into()));
    }
    let (m0, m1) = fit_with_configs(studies, basis0, basis1, &opts.refit_options)?;
    bootstrap_from_fits(studies, new, [basis0, basis1], [&m0, &m1], j, opts)
}

pub fn bootstrap_inference(
    studies: &[StudyData],
    new: &NewStudySurrogates,
    basis0: BasisConfig,
    basis1: BasisConfig,
    j: usize,
    opts: &BootstrapOptions,
) -> Result<ResilienceEstimate> {
    Ok(bootstrap_report(studies, new, basis0, basis1, j, opts)?.estimate)
}

fn condition_number(h: &DMatrix<f64>) -> f64 {
    let eig = h.clone().symmetric_eigenvalues();
    let max = eig.iter().map(|e| e.abs()).fold(0.0, f64::max);
    let min = eig.iter().map(|e| e.abs()).fold(f64::INFINITY, f64::min);
    if eig.iter().any(|e| !e.is_finite()) {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Delta-method variance `g' H^-1 g` for one arm, or `None` when the
/// Hessian is unusable.
fn delta_variance(hess: &DMatrix<f64>, grad: &[f64]) -> Option<f64> {
    let chol = nalgebra::Cholesky::new(hess.clone())?;
    let g = DVector::from_column_slice(grad);
    let v = g.dot(&chol.solve(&g));
    (v.is_finite() && v >= 0.0).then_some(v)
}

/// PAB from already-fitted arms. Falls back to [`bootstrap_inference`]
/// with the same options when the Hessian cannot be inverted.
pub fn pab_from_fits(
    studies: &[StudyData],
    new: &NewStudySurrogates,
    basis: [BasisConfig; 2],
    fits: [&FittedGroupModel; 2],
    j: usize,
    opts: &BootstrapOptions,
) -> Result<(ResilienceEstimate, PabDiagnostics)> {
    opts.validate()?;
    let point = estimate_resilience(fits[0], fits[1], new, j, opts.seed)?;

    let hessians: Vec<Result<DMatrix<f64>>> = Group::BOTH
        .iter()
        .map(|&g| {
            let model = fits[g.index() as usize];
            let prepared = PreparedGroup::new(studies, g, &model.spec);
            let objective = |x: &[f64]| prepared.neg_loglik(&vec_to_params(x)).unwrap_or(f64::NAN);
            numerical_hessian(objective, &params_to_vec(&model.params), opts.hessian_step)
        })
        .collect();

    let evaluator = ResilienceEvaluator::new(fits[0], fits[1], new, opts.gradient_j, opts.seed);
    let x0 = params_to_vec(&fits[0].params);
    let x1 = params_to_vec(&fits[1].params);
    let split = x0.len();
    let stacked: Vec<f64> = x0.iter().chain(&x1).copied().collect();
    let p_of = |x: &[f64]| {
        evaluator
            .p_hat(&vec_to_params(&x[..split]), &vec_to_params(&x[split..]))
            .unwrap_or(f64::NAN)
    };
    let grad = numerical_gradient(p_of, &stacked, opts.gradient_step);

    let var_sb_samples = par_map(opts.replicates, |r| {
        let mut rng = stream(opts.seed, &[tag::SURROGATE_RESAMPLE, r as u64]);
        let new_r = resample_new_study(new, &mut rng);
        estimate_resilience(fits[0], fits[1], &new_r, j, derive_seed(opts.seed, &[tag::SURROGATE_RESAMPLE, r as u64, 1]))
            .map(|e| e.p_hat)
    });
    let var_sb_samples: Result<Vec<f64>> = var_sb_samples.into_iter().collect();

    let mut diag = PabDiagnostics {
        hessian_cond: f64::NAN,
        grad_norm: f64::NAN,
        var_param: f64::NAN,
        var_sb: f64::NAN,
        fell_back: false,
    };

    let analytic = (|| -> Option<f64> {
        let grad = grad.as_ref().ok()?;
        diag.grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let mut var_param = 0.0;
        let mut cond: f64 = 0.0;
        for (gi, h) in hessians.iter().enumerate() {
            let h = h.as_ref().ok()?;
            let c = condition_number(h);
            cond = cond.max(c);
            diag.hessian_cond = cond;
            if !(c <= MAX_HESSIAN_COND) {
                return None;
            }
            let g = if gi == 0 { &grad[..split] } else { &grad[split..] };
            var_param += delta_variance(h, g)?;
        }
        Some(var_param)
    })();

    match (analytic, var_sb_samples) {
        (Some(var_param), Ok(samples)) => {
            let var_sb = sample_variance(&samples);
            diag.var_param = var_param;
            diag.var_sb = var_sb;
            let se = (var_param + var_sb).sqrt();
            let z = Normal::standard().inverse_cdf(1.0 - (1.0 - opts.ci_level) / 2.0);
            let ci = ((point.p_hat - z * se).max(0.0), (point.p_hat + z * se).min(1.0));
            log::debug!("pab: var_param={var_param:.3e} var_sb={var_sb:.3e} mean p_r={:.4}", mean(&samples));
            Ok((
                ResilienceEstimate {
                    se: Some(se),
                    ci: Some(ci),
                    method: EstimateMethod::Pab,
                    ..point
                },
                diag,
            ))
        }
        _ => {
            log::info!("PAB Hessian unusable (cond {:.3e}); falling back to the nonparametric bootstrap", diag.hessian_cond);
            diag.fell_back = true;
            let mut est = bootstrap_inference(studies, new, basis[0], basis[1], j, opts)?;
            est.method = EstimateMethod::PabFallbackBootstrap;
            Ok((est, diag))
        }
    }
}

/// Fits both arms, then [`pab_from_fits`].
pub fn pab_inference(
    studies: &[StudyData],
    new: &NewStudySurrogates,
    basis0: BasisConfig,
    basis1: BasisConfig,
    j: usize,
    opts: &BootstrapOptions,
) -> Result<(ResilienceEstimate, PabDiagnostics)> {
    let (m0, m1) = fit_with_configs(studies, basis0, basis1, &opts.refit_options)?;
    pab_from_fits(studies, new, [basis0, basis1], [&m0, &m1], j, opts)
}

/// Nonparametric bootstrap around arms that are already fitted.
pub fn bootstrap_from_existing_fits(
    studies: &[StudyData],
    new: &NewStudySurrogates,
    basis: [BasisConfig; 2],
    fits: [&FittedGroupModel; 2],
    j: usize,
    opts: &BootstrapOptions,
) -> Result<BootstrapReport> {
    opts.validate()?;
    bootstrap_from_fits(studies, new, basis, fits, j, opts)
}
