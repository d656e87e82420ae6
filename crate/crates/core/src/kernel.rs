//! Squared-exponential covariance and the per-study covariance matrix
//! `C = RBF(S, S; sigma2, theta) + v2 I`.

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// Signal variance.
    pub sigma2: f64,
    /// Lengthscale.
    pub theta: f64,
    /// Independent noise variance.
    pub v2: f64,
}

impl KernelParams {
    pub fn new(sigma2: f64, theta: f64, v2: f64) -> Result<Self> {
        let p = KernelParams { sigma2, theta, v2 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma2.is_finite()
            && self.theta.is_finite()
            && self.v2.is_finite()
            && self.sigma2 > 0.0
            && self.theta > 0.0
            && self.v2 >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid kernel parameters {self:?}")))
        }
    }

    #[inline]
    pub fn rbf_sqdist(&self, d2: f64) -> f64 {
        self.sigma2 * (-d2 / (2.0 * self.theta * self.theta)).exp()
    }
}

pub fn rbf(s: f64, t: f64, params: &KernelParams) -> f64 {
    params.rbf_sqdist((s - t) * (s - t))
}

/// Jitter multipliers (relative to sigma2) tried after the exact matrix fails.
pub const JITTER_LADDER: [f64; 7] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// Dense covariance with `v2 + jitter` on the diagonal. Upper triangle is
/// computed and mirrored, so the result is exactly symmetric.
pub fn cov_matrix(s_vec: &[f64], params: &KernelParams, jitter: f64) -> DMatrix<f64> {
    let n = s_vec.len();
    let mut c = DMatrix::zeros(n, n);
    let diag = params.sigma2 + params.v2 + jitter;
    for j in 0..n {
        c[(j, j)] = diag;
        for i in 0..j {
            let v = rbf(s_vec[i], s_vec[j], params);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    c
}

/// Covariance from precomputed squared distances (column-major, n x n).
pub(crate) fn cov_from_sqdist(sqdist: &DMatrix<f64>, params: &KernelParams, jitter: f64) -> DMatrix<f64> {
    let n = sqdist.nrows();
    let mut c = DMatrix::zeros(n, n);
    let diag = params.sigma2 + params.v2 + jitter;
    let scale = -1.0 / (2.0 * params.theta * params.theta);
    for j in 0..n {
        c[(j, j)] = diag;
        for i in (j + 1)..n {
            let v = params.sigma2 * (sqdist[(i, j)] * scale).exp();
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    c
}

pub(crate) fn sqdist_matrix(s_vec: &[f64]) -> DMatrix<f64> {
    let n = s_vec.len();
    DMatrix::from_fn(n, n, |i, j| (s_vec[i] - s_vec[j]) * (s_vec[i] - s_vec[j]))
}

/// Cholesky factor of the covariance, escalating jitter along
/// [`JITTER_LADDER`] when the exact matrix does not factor.
/// Returns the factor and the jitter that was used.
pub fn factor_with_jitter(
    build: impl Fn(f64) -> DMatrix<f64>,
    sigma2: f64,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(ch) = Cholesky::new(build(0.0)) {
        return Ok((ch, 0.0));
    }
    for rel in JITTER_LADDER {
        let jitter = rel * sigma2;
        if let Some(ch) = Cholesky::new(build(jitter)) {
            return Ok((ch, jitter));
        }
    }
    Err(Error::NotPositiveDefinite {
        max_jitter: JITTER_LADDER[JITTER_LADDER.len() - 1] * sigma2,
    })
}

/// Factor `cov_matrix(s_vec, params, .)` with the jitter ladder.
pub fn cholesky_cov(s_vec: &[f64], params: &KernelParams) -> Result<(Cholesky<f64, Dyn>, f64)> {
    factor_with_jitter(|j| cov_matrix(s_vec, params, j), params.sigma2)
}
