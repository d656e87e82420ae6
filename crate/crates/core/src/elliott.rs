//! Comparator: bivariate random-effects meta-analysis of the study-level
//! treatment effects on the surrogate and the outcome, and the conditional
//! probability that the outcome effect is negative given the new study's
//! surrogate effect.
//!
//! Model: `(dS_k, dY_k) ~ N((beta_s, beta_y), D + W_k)` with `W_k` the
//! within-study sampling covariance plugged in as known. Fitted by maximum
//! likelihood with `D = L L'` (`L` lower triangular) and `beta` profiled by
//! generalized least squares.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::gp_likelihood::StudyData;
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::stats::mean;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyEffects {
    pub delta_s: f64,
    pub delta_y: f64,
    /// Sampling covariance of `(delta_s, delta_y)`, row-major.
    pub within_cov: [[f64; 2]; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaFit {
    pub beta_s: f64,
    pub beta_y: f64,
    pub d_aa: f64,
    pub d_ab: f64,
    pub d_bb: f64,
    pub neg_loglik: f64,
}

impl MetaFit {
    pub fn between_cov(&self) -> Matrix2<f64> {
        Matrix2::new(self.d_aa, self.d_ab, self.d_ab, self.d_bb)
    }
}

/// 2x2 sample covariance (divisor n - 1) of paired vectors.
fn pair_cov(a: &[f64], b: &[f64]) -> [[f64; 2]; 2] {
    let n = a.len() as f64;
    let (ma, mb) = (mean(a), mean(b));
    let mut c = [[0.0; 2]; 2];
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        c[0][0] += dx * dx;
        c[0][1] += dx * dy;
        c[1][1] += dy * dy;
    }
    let d = n - 1.0;
    c[0][0] /= d;
    c[0][1] /= d;
    c[1][1] /= d;
    c[1][0] = c[0][1];
    c
}

/// Difference-in-means effects and their sampling covariance
/// `sum_g Cov_g(s, y) / n_g`.
pub fn compute_study_effects(study: &StudyData) -> Result<StudyEffects> {
    if study.s0.len() < 2 || study.s1.len() < 2 {
        return Err(Error::SingletonGroup {
            study: study.study_id.clone(),
        });
    }
    let c0 = pair_cov(&study.s0, &study.y0);
    let c1 = pair_cov(&study.s1, &study.y1);
    let (n0, n1) = (study.s0.len() as f64, study.s1.len() as f64);
    let mut within = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            within[i][j] = c0[i][j] / n0 + c1[i][j] / n1;
        }
    }
    Ok(StudyEffects {
        delta_s: mean(&study.s1) - mean(&study.s0),
        delta_y: mean(&study.y1) - mean(&study.y0),
        within_cov: within,
    })
}

fn to_matrix(c: &[[f64; 2]; 2]) -> Matrix2<f64> {
    Matrix2::new(c[0][0], c[0][1], c[1][0], c[1][1])
}

fn between_from_chol(x: &[f64]) -> Matrix2<f64> {
    let l = Matrix2::new(x[0], 0.0, x[1], x[2]);
    l * l.transpose()
}

/// Profiled negative log-likelihood for a given between-study covariance.
/// Returns `(value, beta)`.
fn profile(effects: &[StudyEffects], d: &Matrix2<f64>) -> Option<(f64, Vector2<f64>)> {
    let mut info = Matrix2::zeros();
    let mut score = Vector2::zeros();
    let mut inverses = Vec::with_capacity(effects.len());
    let mut logdet = 0.0;
    for e in effects {
        let v = d + to_matrix(&e.within_cov);
        let det = v.determinant();
        if !(det > 0.0 && v[(0, 0)] > 0.0) {
            return None;
        }
        let inv = v.try_inverse()?;
        let x = Vector2::new(e.delta_s, e.delta_y);
        info += inv;
        score += inv * x;
        logdet += det.ln();
        inverses.push(inv);
    }
    let beta = info.try_inverse()? * score;
    let quad: f64 = effects
        .iter()
        .zip(&inverses)
        .map(|(e, inv)| {
            let r = Vector2::new(e.delta_s, e.delta_y) - beta;
            r.dot(&(inv * r))
        })
        .sum();
    let value = 0.5 * (logdet + quad) + effects.len() as f64 * LN_2PI;
    value.is_finite().then_some((value, beta))
}

/// Maximum-likelihood fit of the bivariate random-effects model.
pub fn fit_bivariate_meta(effects: &[StudyEffects]) -> Result<MetaFit> {
    if effects.len() < 3 {
        return Err(Error::InvalidInput("the bivariate meta-analysis needs at least 3 studies".into()));
    }
    let k = effects.len() as f64;
    let ms = effects.iter().map(|e| e.delta_s).sum::<f64>() / k;
    let my = effects.iter().map(|e| e.delta_y).sum::<f64>() / k;
    let mut sample = Matrix2::zeros();
    let mut within_mean = Matrix2::zeros();
    for e in effects {
        let r = Vector2::new(e.delta_s - ms, e.delta_y - my);
        sample += r * r.transpose() / k;
        within_mean += to_matrix(&e.within_cov) / k;
    }
    let scale = (sample[(0, 0)] + sample[(1, 1)] + within_mean[(0, 0)] + within_mean[(1, 1)]).max(1e-12);

    // moment start: sample covariance less the average within-study covariance, made PD
    let mut moment = sample - within_mean;
    let floor = 1e-3 * scale;
    moment[(0, 0)] = moment[(0, 0)].max(floor);
    moment[(1, 1)] = moment[(1, 1)].max(floor);
    let max_ab = 0.99 * (moment[(0, 0)] * moment[(1, 1)]).sqrt();
    moment[(0, 1)] = moment[(0, 1)].clamp(-max_ab, max_ab);
    moment[(1, 0)] = moment[(0, 1)];
    let chol_start = |m: &Matrix2<f64>| {
        let a = m[(0, 0)].sqrt();
        let b = m[(1, 0)] / a;
        let c = (m[(1, 1)] - b * b).max(0.0).sqrt();
        [a, b, c]
    };

    let objective = |x: &[f64]| profile(effects, &between_from_chol(x)).map_or(f64::INFINITY, |(v, _)| v);
    let bound = 1e3 * scale.sqrt();
    let bounds = [(-bound, bound); 3];
    let step = 0.3 * scale.sqrt();
    let nm = NelderMeadOptions {
        max_evals: 3000,
        rel_tol: 1e-12,
        x_tol: 1e-9 * scale.sqrt(),
        step: vec![step; 3],
    };
    let starts = [
        chol_start(&moment),
        chol_start(&(Matrix2::identity() * 0.1 * scale)),
        [1e-3 * scale.sqrt(), 0.0, 1e-3 * scale.sqrt()],
    ];
    let mut best = starts
        .iter()
        .map(|s| nelder_mead(objective, s, &bounds, &nm))
        .min_by(|a, b| a.value.total_cmp(&b.value))
        .expect("non-empty starts");
    // restart from the optimum with a fresh simplex to escape premature collapse
    let polish = nelder_mead(objective, &best.x, &bounds, &nm);
    if polish.value <= best.value {
        best = polish;
    }
    if !best.value.is_finite() {
        return Err(Error::OptimizationFailed("bivariate meta-analysis likelihood is not finite".into()));
    }
    let d = between_from_chol(&best.x);
    let (value, beta) = profile(effects, &d).ok_or_else(|| Error::OptimizationFailed("degenerate optimum".into()))?;
    Ok(MetaFit {
        beta_s: beta[0],
        beta_y: beta[1],
        d_aa: d[(0, 0)],
        d_ab: d[(0, 1)],
        d_bb: d[(1, 1)],
        neg_loglik: value,
    })
}

/// `P(dY < 0 | dS = delta_s_new)` under the fitted between-study normal.
pub fn elliott_prob(fit: &MetaFit, delta_s_new: f64) -> Result<f64> {
    if !(fit.d_aa > 0.0) {
        return Err(Error::DegenerateConditional("between-study surrogate variance is zero".into()));
    }
    let cond_mean = fit.beta_y + fit.d_ab / fit.d_aa * (delta_s_new - fit.beta_s);
    let cond_var = fit.d_bb - fit.d_ab * fit.d_ab / fit.d_aa;
    let schur = fit.between_cov().determinant() / fit.d_aa;
    debug_assert!((cond_var - schur).abs() <= 1e-9 * fit.d_bb.abs().max(1e-300));
    if cond_var < -1e-12 {
        return Err(Error::DegenerateConditional(format!("conditional variance {cond_var:e} is negative")));
    }
    if cond_var <= 0.0 {
        return Ok(if cond_mean < 0.0 { 1.0 } else { 0.0 });
    }
    Ok(Normal::standard().cdf(-cond_mean / cond_var.sqrt()))
}
