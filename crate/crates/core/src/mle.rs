//! Maximum-likelihood fit of one arm's mean coefficients and kernel
//! parameters, pooled across the completed studies.
//!
//! The search runs over `(log theta, log v2/sigma2)`; for each pair the
//! generalized least-squares `beta` and the closed-form `sigma2` are the
//! exact maximizers, so the optimum found is the joint maximum over
//! `(beta, sigma2, theta, v2)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp_likelihood::{pooled_surrogates, Group, GroupParams, PreparedGroup, StudyData};
use crate::kernel::KernelParams;
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::parallel::par_map;
use crate::rng::{stream, tag};
use crate::spline_basis::{BasisConfig, BasisSpec};

/// Floor applied to the starting variances when the least-squares fit is exact.
pub const VARIANCE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogBounds {
    pub log_sigma2: (f64, f64),
    pub log_theta: (f64, f64),
    pub log_v2: (f64, f64),
}

impl LogBounds {
    /// Symmetric box of half-width `width` around `params` in log space.
    pub fn around(params: &KernelParams, width: f64) -> Self {
        let b = |v: f64| (v.ln() - width, v.ln() + width);
        LogBounds {
            log_sigma2: b(params.sigma2),
            log_theta: b(params.theta),
            log_v2: b(params.v2.max(VARIANCE_FLOOR)),
        }
    }

    fn contains(&self, k: &KernelParams) -> bool {
        let inside = |v: f64, (lo, hi): (f64, f64)| v.ln() >= lo - 1e-12 && v.ln() <= hi + 1e-12;
        inside(k.sigma2, self.log_sigma2) && inside(k.theta, self.log_theta) && inside(k.v2, self.log_v2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Objective evaluations per restart.
    pub max_iters: usize,
    pub rel_tol: f64,
    pub n_restarts: usize,
    /// Explicit log-space bounds; `None` uses `bound_width` around the start.
    pub bounds: Option<LogBounds>,
    pub bound_width: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iters: 400,
            rel_tol: 1e-9,
            n_restarts: 3,
            bounds: None,
            bound_width: 12.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedGroupModel {
    pub spec: BasisSpec,
    pub params: GroupParams,
    pub converged: bool,
    pub final_neg_loglik: f64,
    pub n_evals: usize,
}

/// Median of `|a_i - a_j|` over all pairs `i < j`.
fn median_pairwise_distance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mut d: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            d.push((values[i] - values[j]).abs());
        }
    }
    let m = d.len();
    let h = (m - 1) as f64 * 0.5;
    let lo = h.floor() as usize;
    let (_, &mut a, rest) = d.select_nth_unstable_by(lo, f64::total_cmp);
    if h == lo as f64 {
        a
    } else {
        let b = rest.iter().copied().fold(f64::INFINITY, f64::min);
        0.5 * (a + b)
    }
}

/// Weighted least squares via the normal equations, rejecting
/// numerically singular designs.
fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>, w: &[f64]) -> Result<DVector<f64>> {
    let p = x.ncols();
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    for (i, &wi) in w.iter().enumerate() {
        let row = x.row(i);
        for a in 0..p {
            xty[a] += wi * row[a] * y[i];
            for b in 0..p {
                xtx[(a, b)] += wi * row[a] * row[b];
            }
        }
    }
    let eig = xtx.clone().symmetric_eigenvalues();
    let max = eig.iter().copied().fold(0.0, f64::max);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min <= max * 1e-12 {
        return Err(Error::RankDeficientDesign);
    }
    nalgebra::Cholesky::new(xtx)
        .map(|c| c.solve(&xty))
        .ok_or(Error::RankDeficientDesign)
}

fn initialize_prepared(prepared: &PreparedGroup, pooled_s: &[f64]) -> Result<GroupParams> {
    let (x, y, w) = prepared.pooled_design();
    let beta = least_squares(&x, &y, &w)?;
    let resid = &y - &x * &beta;
    let wsum: f64 = w.iter().sum();
    let mean = resid.iter().zip(&w).map(|(r, wi)| r * wi).sum::<f64>() / wsum;
    let var_r = if wsum > 1.0 {
        resid.iter().zip(&w).map(|(r, wi)| wi * (r - mean) * (r - mean)).sum::<f64>() / (wsum - 1.0)
    } else {
        0.0
    };
    let half = (var_r / 2.0).max(VARIANCE_FLOOR);
    let theta = match median_pairwise_distance(pooled_s) {
        d if d > 0.0 && d.is_finite() => d,
        _ => 1.0,
    };
    Ok(GroupParams {
        beta: beta.iter().copied().collect(),
        kernel: KernelParams {
            sigma2: half,
            theta,
            v2: half,
        },
    })
}

/// Least-squares starting point: pooled OLS coefficients, half the residual
/// variance to each of `sigma2` and `v2`, and the median pairwise surrogate
/// distance as lengthscale.
pub fn initialize(studies: &[StudyData], group: Group, spec: &BasisSpec) -> Result<GroupParams> {
    if studies.is_empty() {
        return Err(Error::EmptyInput);
    }
    let prepared = PreparedGroup::new(studies, group, spec);
    initialize_prepared(&prepared, &pooled_surrogates(studies, group))
}

pub fn fit_group(studies: &[StudyData], group: Group, spec: &BasisSpec, opts: &FitOptions) -> Result<FittedGroupModel> {
    fit_group_from(studies, group, spec, opts, None)
}

/// Like [`fit_group`], but the first restart starts from `start` instead of
/// the least-squares initialization.
pub fn fit_group_from(
    studies: &[StudyData],
    group: Group,
    spec: &BasisSpec,
    opts: &FitOptions,
    start: Option<&KernelParams>,
) -> Result<FittedGroupModel> {
    if studies.is_empty() {
        return Err(Error::EmptyInput);
    }
    let prepared = PreparedGroup::new(studies, group, spec);
    fit_prepared(&prepared, &pooled_surrogates(studies, group), spec, opts, start)
}

pub(crate) fn fit_prepared(
    prepared: &PreparedGroup,
    pooled_s: &[f64],
    spec: &BasisSpec,
    opts: &FitOptions,
    start: Option<&KernelParams>,
) -> Result<FittedGroupModel> {
    if !(opts.rel_tol > 0.0) {
        return Err(Error::InvalidInput("rel_tol must be positive".into()));
    }
    let init = initialize_prepared(prepared, pooled_s)?;
    let base = start.copied().unwrap_or(init.kernel);
    let bounds = opts.bounds.unwrap_or_else(|| LogBounds::around(&base, opts.bound_width));
    let search_bounds = [
        bounds.log_theta,
        (bounds.log_v2.0 - bounds.log_sigma2.1, bounds.log_v2.1 - bounds.log_sigma2.0),
    ];

    let objective = |x: &[f64]| match prepared.profiled(x[0].exp(), x[1].exp()) {
        Ok(e) => e.neg_loglik,
        Err(_) => f64::INFINITY,
    };

    let n_restarts = opts.n_restarts.max(1);
    let runs = par_map(n_restarts, |r| {
        let (theta, ratio) = if r == 0 {
            (base.theta, base.v2.max(VARIANCE_FLOOR) / base.sigma2)
        } else {
            let mut rng = stream(opts.seed, &[tag::RESTART, r as u64]);
            let jitter = |rng: &mut crate::rng::StreamRng| rng.random_range(-1.0f64..1.0).exp();
            let theta = base.theta * jitter(&mut rng);
            let sigma2 = base.sigma2 * jitter(&mut rng);
            let v2 = base.v2.max(VARIANCE_FLOOR) * jitter(&mut rng);
            (theta, v2 / sigma2)
        };
        let step = if start.is_some() && r == 0 { 0.25 } else { 0.5 };
        let nm = NelderMeadOptions {
            max_evals: opts.max_iters,
            rel_tol: opts.rel_tol,
            x_tol: 1e-4,
            step: vec![step; 2],
        };
        nelder_mead(objective, &[theta.ln(), ratio.ln()], &search_bounds, &nm)
    });

    let total_evals: usize = runs.iter().map(|m| m.n_evals).sum();
    let best = runs
        .into_iter()
        .filter(|m| m.value.is_finite())
        .min_by(|a, b| a.value.total_cmp(&b.value))
        .ok_or_else(|| Error::OptimizationFailed("no restart reached a finite objective".into()))?;

    let (theta, ratio) = (best.x[0].exp(), best.x[1].exp());
    let eval = prepared
        .profiled(theta, ratio)
        .map_err(|e| Error::OptimizationFailed(e.to_string()))?;
    let clamp = |v: f64, (lo, hi): (f64, f64)| v.clamp(lo.exp(), hi.exp());
    let sigma2 = clamp(eval.sigma2, bounds.log_sigma2);
    let v2 = clamp(ratio * eval.sigma2, bounds.log_v2);
    let kernel = KernelParams { sigma2, theta, v2 };
    debug_assert!(bounds.contains(&kernel));
    let params = GroupParams {
        beta: eval.beta,
        kernel,
    };
    let final_neg_loglik = if sigma2 == eval.sigma2 && v2 == ratio * eval.sigma2 {
        eval.neg_loglik
    } else {
        prepared.neg_loglik(&params)?
    };
    Ok(FittedGroupModel {
        spec: spec.clone(),
        params,
        converged: best.converged,
        final_neg_loglik,
        n_evals: total_evals,
    })
}

/// Fits control and treated arms independently.
pub fn fit_both_groups(
    studies: &[StudyData],
    spec0: &BasisSpec,
    spec1: &BasisSpec,
    opts: &FitOptions,
) -> Result<(FittedGroupModel, FittedGroupModel)> {
    let m0 = fit_group(studies, Group::Control, spec0, opts).map_err(|e| e.in_group(0))?;
    let m1 = fit_group(studies, Group::Treated, spec1, opts).map_err(|e| e.in_group(1))?;
    Ok((m0, m1))
}

/// Knots from each arm's pooled surrogates, then [`fit_both_groups`].
pub fn fit_with_configs(
    studies: &[StudyData],
    basis0: BasisConfig,
    basis1: BasisConfig,
    opts: &FitOptions,
) -> Result<(FittedGroupModel, FittedGroupModel)> {
    let spec0 = basis0
        .build(&pooled_surrogates(studies, Group::Control))
        .map_err(|e| e.in_group(0))?;
    let spec1 = basis1
        .build(&pooled_surrogates(studies, Group::Treated))
        .map_err(|e| e.in_group(1))?;
    fit_both_groups(studies, &spec0, &spec1, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp_likelihood::pooled_neg_loglik;

    #[test]
    fn median_pairwise_enumeration() {
        // pairs of {0,1,2,3}: 1,2,3,1,2,1 -> sorted 1,1,1,2,2,3 -> median 1.5
        assert_eq!(median_pairwise_distance(&[0.0, 1.0, 2.0, 3.0]), 1.5);
        assert_eq!(median_pairwise_distance(&[0.0, 4.0, 1.0]), 3.0);
        assert_eq!(median_pairwise_distance(&[2.0]), 0.0);
    }

    fn line_study(id: &str, s: Vec<f64>) -> StudyData {
        let y: Vec<f64> = s.iter().map(|v| 2.0 * v - 1.0).collect();
        StudyData::new(id, s.clone(), y.clone(), s, y).unwrap()
    }

    #[test]
    fn exact_line_hits_variance_floor() {
        let studies = vec![line_study("a", vec![0.0, 1.0, 2.0]), line_study("b", vec![0.5, 3.0])];
        let spec = BasisConfig::linear().build(&pooled_surrogates(&studies, Group::Control)).unwrap();
        let p = initialize(&studies, Group::Control, &spec).unwrap();
        // beta holds the line's values at the boundary knots 0 and 3
        assert!((p.beta[0] + 1.0).abs() < 1e-10 && (p.beta[1] - 5.0).abs() < 1e-10);
        assert_eq!(p.kernel.sigma2, VARIANCE_FLOOR);
        assert_eq!(p.kernel.v2, VARIANCE_FLOOR);
    }

    #[test]
    fn theta_is_median_pairwise_distance() {
        let studies = vec![line_study("a", vec![0.0, 1.0, 2.0, 3.0])];
        let spec = BasisConfig::linear().build(&[0.0, 3.0]).unwrap();
        let p = initialize(&studies, Group::Treated, &spec).unwrap();
        assert_eq!(p.kernel.theta, 1.5);
    }

    #[test]
    fn ols_matches_normal_equations() {
        let s: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let y: Vec<f64> = s.iter().enumerate().map(|(i, v)| v * v - 0.5 * v + (i as f64).cos()).collect();
        let studies = vec![StudyData::new("a", s.clone(), y.clone(), s.clone(), y.clone()).unwrap()];
        let spec = BasisConfig::cubic_spline(1).build(&s).unwrap();
        let p = initialize(&studies, Group::Control, &spec).unwrap();
        let x = crate::spline_basis::design_matrix(&spec, &s);
        let yv = DVector::from_column_slice(&y);
        let oracle = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * yv;
        for (a, b) in p.beta.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn rank_deficient_design() {
        // every surrogate at the lower boundary except one: a cubic basis has too few distinct rows
        let s = vec![0.0, 0.0, 0.0, 1.0];
        let studies = vec![StudyData::new("a", s.clone(), vec![1.0; 4], s.clone(), vec![1.0; 4]).unwrap()];
        let spec = BasisConfig::cubic().build(&s).unwrap();
        assert!(matches!(
            initialize(&studies, Group::Control, &spec),
            Err(Error::RankDeficientDesign)
        ));
    }

    #[test]
    fn tiny_study_gives_finite_fit() {
        let studies = vec![StudyData::new("a", vec![0.0, 1.0, 2.5], vec![0.3, 1.1, 1.9], vec![0.2, 1.5, 3.0], vec![1.0, 0.4, 2.2]).unwrap()];
        let (m0, m1) = fit_with_configs(&studies, BasisConfig::linear(), BasisConfig::linear(), &FitOptions::default()).unwrap();
        for m in [m0, m1] {
            assert!(m.final_neg_loglik.is_finite());
            assert!(m.params.beta.iter().all(|b| b.is_finite()));
            m.params.kernel.validate().unwrap();
        }
    }

    #[test]
    fn never_worse_than_start() {
        let s: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
        let studies: Vec<StudyData> = (0..3)
            .map(|k| {
                let y: Vec<f64> = s.iter().map(|v| (v + k as f64).sin() + 0.2 * v).collect();
                StudyData::new(format!("{k}"), s.clone(), y.clone(), s.clone(), y).unwrap()
            })
            .collect();
        let spec = BasisConfig::cubic().build(&s).unwrap();
        let init = initialize(&studies, Group::Control, &spec).unwrap();
        let start = pooled_neg_loglik(&studies, Group::Control, &spec, &init).unwrap();
        let fit = fit_group(&studies, Group::Control, &spec, &FitOptions::default()).unwrap();
        assert!(fit.final_neg_loglik <= start);
        let check = pooled_neg_loglik(&studies, Group::Control, &spec, &fit.params).unwrap();
        assert!((check - fit.final_neg_loglik).abs() < 1e-8);
    }
}
