//! Gaussian-process log-likelihood of the completed studies.
//!
//! Within group `g` of study `k` the outcome vector is multivariate normal
//! with mean `B(S) beta` and covariance `C_k = RBF(S, S) + v2 I`. All
//! evaluations go through a Cholesky factor; no explicit inverse is formed.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{cov_from_sqdist, factor_with_jitter, sqdist_matrix, KernelParams};
use crate::spline_basis::{design_matrix, BasisSpec};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    Control = 0,
    Treated = 1,
}

impl Group {
    pub const BOTH: [Group; 2] = [Group::Control, Group::Treated];

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn from_index(g: u8) -> Option<Group> {
        match g {
            0 => Some(Group::Control),
            1 => Some(Group::Treated),
            _ => None,
        }
    }
}

/// One completed study: surrogate and outcome vectors per treatment arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyData {
    pub study_id: String,
    pub s0: Vec<f64>,
    pub y0: Vec<f64>,
    pub s1: Vec<f64>,
    pub y1: Vec<f64>,
}

impl StudyData {
    pub fn new(study_id: impl Into<String>, s0: Vec<f64>, y0: Vec<f64>, s1: Vec<f64>, y1: Vec<f64>) -> Result<Self> {
        let st = StudyData {
            study_id: study_id.into(),
            s0,
            y0,
            s1,
            y1,
        };
        st.validate()?;
        Ok(st)
    }

    pub fn validate(&self) -> Result<()> {
        for (s, y) in [(&self.s0, &self.y0), (&self.s1, &self.y1)] {
            if s.is_empty() || s.len() != y.len() {
                return Err(Error::InvalidInput(format!(
                    "study '{}': each group needs matching, non-empty s and y",
                    self.study_id
                )));
            }
            if s.iter().chain(y.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "study '{}' contains non-finite values",
                    self.study_id
                )));
            }
        }
        Ok(())
    }

    pub fn group(&self, g: Group) -> (&[f64], &[f64]) {
        match g {
            Group::Control => (&self.s0, &self.y0),
            Group::Treated => (&self.s1, &self.y1),
        }
    }
}

/// Surrogates observed in the new study, whose outcomes are unknown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewStudySurrogates {
    pub s0: Vec<f64>,
    pub s1: Vec<f64>,
}

impl NewStudySurrogates {
    pub fn new(s0: Vec<f64>, s1: Vec<f64>) -> Result<Self> {
        if s0.is_empty() || s1.is_empty() {
            return Err(Error::InvalidInput("new study needs surrogates in both groups".into()));
        }
        if s0.iter().chain(s1.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("new-study surrogates must be finite".into()));
        }
        Ok(NewStudySurrogates { s0, s1 })
    }

    pub fn group(&self, g: Group) -> &[f64] {
        match g {
            Group::Control => &self.s0,
            Group::Treated => &self.s1,
        }
    }
}

/// Mean coefficients and kernel parameters of one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupParams {
    pub beta: Vec<f64>,
    pub kernel: KernelParams,
}

/// Pooled surrogates of one arm across studies.
pub fn pooled_surrogates(studies: &[StudyData], group: Group) -> Vec<f64> {
    studies.iter().flat_map(|st| st.group(group).0.iter().copied()).collect()
}

/// Gaussian log-density of `y` with mean `B(s) beta` and covariance
/// `cov_matrix(s, kernel)`, constant term included.
pub fn study_loglik(s: &[f64], y: &[f64], spec: &BasisSpec, params: &GroupParams) -> Result<f64> {
    if s.is_empty() || s.len() != y.len() {
        return Err(Error::InvalidInput("s and y must be non-empty and of equal length".into()));
    }
    let prepared = PreparedStudy::new(s, y, spec, 1.0);
    prepared.loglik(params)
}

/// Negative sum of [`study_loglik`] over the studies, for one arm.
pub fn pooled_neg_loglik(studies: &[StudyData], group: Group, spec: &BasisSpec, params: &GroupParams) -> Result<f64> {
    if studies.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut total = 0.0;
    for st in studies {
        let (s, y) = st.group(group);
        total -= study_loglik(s, y, spec, params)?;
    }
    Ok(total)
}

/// A study arm with its design matrix and squared distances cached.
#[derive(Debug, Clone)]
pub(crate) struct PreparedStudy {
    pub design: DMatrix<f64>,
    pub y: DVector<f64>,
    pub sqdist: DMatrix<f64>,
    /// Multiplicity of the study in a bootstrap resample.
    pub weight: f64,
}

impl PreparedStudy {
    pub fn new(s: &[f64], y: &[f64], spec: &BasisSpec, weight: f64) -> Self {
        PreparedStudy {
            design: design_matrix(spec, s),
            y: DVector::from_column_slice(y),
            sqdist: sqdist_matrix(s),
            weight,
        }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn loglik(&self, params: &GroupParams) -> Result<f64> {
        if params.beta.len() != self.design.ncols() {
            return Err(Error::InvalidInput(format!(
                "beta has length {} but the basis has {} functions",
                params.beta.len(),
                self.design.ncols()
            )));
        }
        let k = &params.kernel;
        let (chol, _) = factor_with_jitter(|j| cov_from_sqdist(&self.sqdist, k, j), k.sigma2)?;
        let beta = DVector::from_column_slice(&params.beta);
        let resid = &self.y - &self.design * beta;
        let l = chol.l_dirty();
        let mut z = resid;
        l.solve_lower_triangular_mut(&mut z);
        let half_logdet: f64 = (0..self.n()).map(|i| l[(i, i)].ln()).sum();
        Ok(-half_logdet - 0.5 * z.norm_squared() - 0.5 * self.n() as f64 * LN_2PI)
    }
}

/// All studies of one arm, prepared for repeated likelihood evaluation.
#[derive(Debug, Clone)]
pub(crate) struct PreparedGroup {
    pub studies: Vec<PreparedStudy>,
    pub n_basis: usize,
}

/// Result of the likelihood with `beta` and `sigma2` concentrated out.
#[derive(Debug, Clone)]
pub(crate) struct ProfiledEval {
    pub neg_loglik: f64,
    pub beta: Vec<f64>,
    pub sigma2: f64,
}

impl PreparedGroup {
    pub fn new(studies: &[StudyData], group: Group, spec: &BasisSpec) -> Self {
        Self::weighted(studies.iter().map(|st| (st, 1.0)), group, spec)
    }

    pub fn weighted<'a>(
        studies: impl IntoIterator<Item = (&'a StudyData, f64)>,
        group: Group,
        spec: &BasisSpec,
    ) -> Self {
        let studies = studies
            .into_iter()
            .map(|(st, w)| {
                let (s, y) = st.group(group);
                PreparedStudy::new(s, y, spec, w)
            })
            .collect();
        PreparedGroup {
            studies,
            n_basis: spec.n_basis(),
        }
    }

    pub fn neg_loglik(&self, params: &GroupParams) -> Result<f64> {
        let mut total = 0.0;
        for st in &self.studies {
            total -= st.weight * st.loglik(params)?;
        }
        Ok(total)
    }

    /// Weighted pooled design and outcomes, for least-squares starts.
    pub fn pooled_design(&self) -> (DMatrix<f64>, DVector<f64>, Vec<f64>) {
        let n: usize = self.studies.iter().map(|s| s.n()).sum();
        let mut x = DMatrix::zeros(n, self.n_basis);
        let mut y = DVector::zeros(n);
        let mut w = Vec::with_capacity(n);
        let mut row = 0;
        for st in &self.studies {
            for i in 0..st.n() {
                x.row_mut(row).copy_from(&st.design.row(i));
                y[row] = st.y[i];
                w.push(st.weight);
                row += 1;
            }
        }
        (x, y, w)
    }

    /// Concentrated negative log-likelihood at lengthscale `theta` and
    /// noise-to-signal ratio `ratio = v2 / sigma2`. The generalized
    /// least-squares `beta` and the closed-form `sigma2` maximize the full
    /// likelihood for those two values.
    pub fn profiled(&self, theta: f64, ratio: f64) -> Result<ProfiledEval> {
        let l = self.n_basis;
        let corr = KernelParams {
            sigma2: 1.0,
            theta,
            v2: ratio,
        };
        let mut a = DMatrix::<f64>::zeros(l, l);
        let mut b = DVector::<f64>::zeros(l);
        let mut c = 0.0;
        let mut logdet = 0.0;
        let mut n_total = 0.0;
        for st in &self.studies {
            let (chol, _) = factor_with_jitter(|j| cov_from_sqdist(&st.sqdist, &corr, j), 1.0)?;
            let lower = chol.l_dirty();
            let mut z = st.design.clone();
            lower.solve_lower_triangular_mut(&mut z);
            let mut u = st.y.clone();
            lower.solve_lower_triangular_mut(&mut u);
            let w = st.weight;
            a.gemm_tr(w, &z, &z, 1.0);
            b.gemv_tr(w, &z, &u, 1.0);
            c += w * u.norm_squared();
            logdet += w * 2.0 * (0..st.n()).map(|i| lower[(i, i)].ln()).sum::<f64>();
            n_total += w * st.n() as f64;
        }
        let a_chol = nalgebra::Cholesky::new(a).ok_or(Error::RankDeficientDesign)?;
        let beta = a_chol.solve(&b);
        let quad = (c - b.dot(&beta)).max(0.0);
        let sigma2 = quad / n_total;
        if !(sigma2 > 0.0) {
            return Err(Error::NonFiniteEvaluation(format!(
                "zero residual variance at theta={theta}, ratio={ratio}"
            )));
        }
        let neg_loglik = 0.5 * (logdet + n_total * sigma2.ln() + n_total + n_total * LN_2PI);
        Ok(ProfiledEval {
            neg_loglik,
            beta: beta.iter().copied().collect(),
            sigma2,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::cov_matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Dense oracle: explicit determinant and inverse.
    fn dense_mvn_logpdf(y: &[f64], mean: &[f64], cov: &DMatrix<f64>) -> f64 {
        let n = y.len();
        let r = DVector::from_iterator(n, y.iter().zip(mean).map(|(a, b)| a - b));
        let inv = cov.clone().try_inverse().unwrap();
        let det = cov.determinant();
        -0.5 * det.ln() - 0.5 * (r.transpose() * inv * &r)[(0, 0)] - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
    }

    fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>, BasisSpec, GroupParams) {
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..4.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let spec = BasisSpec::new(3, vec![], (-2.0, 4.0)).unwrap();
        let params = GroupParams {
            beta: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
            kernel: KernelParams::new(rng.random_range(0.2..2.0), rng.random_range(0.3..3.0), rng.random_range(0.05..1.0))
                .unwrap(),
        };
        (s, y, spec, params)
    }

    #[test]
    fn standard_normal_at_mean() {
        let spec = BasisSpec::new(1, vec![], (0.0, 1.0)).unwrap();
        let params = GroupParams {
            beta: vec![0.3, 0.3],
            kernel: KernelParams::new(0.4, 1.0, 0.6).unwrap(),
        };
        let ll = study_loglik(&[0.5], &[0.3], &spec, &params).unwrap();
        assert!((ll + 0.5 * LN_2PI).abs() < 1e-14);
    }

    #[test]
    fn matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 1..=10 {
            let (s, y, spec, params) = random_instance(&mut rng, n);
            let mean: Vec<f64> = (design_matrix(&spec, &s) * DVector::from_column_slice(&params.beta))
                .iter()
                .copied()
                .collect();
            let oracle = dense_mvn_logpdf(&y, &mean, &cov_matrix(&s, &params.kernel, 0.0));
            let ll = study_loglik(&s, &y, &spec, &params).unwrap();
            assert!((ll - oracle).abs() < 1e-8, "n={n}: {ll} vs {oracle}");
        }
    }

    #[test]
    fn quadratic_term_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (s, y, spec, mut params) = random_instance(&mut rng, 6);
        params.beta = vec![0.0; 4];
        let base = study_loglik(&s, &[0.0; 6], &spec, &params).unwrap();
        let q1 = base - study_loglik(&s, &y, &spec, &params).unwrap();
        let y2: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let q2 = base - study_loglik(&s, &y2, &spec, &params).unwrap();
        assert!((q2 - 4.0 * q1).abs() < 1e-10 * q2.abs().max(1.0));
    }

    #[test]
    fn pooled_is_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = BasisSpec::new(3, vec![], (-2.0, 4.0)).unwrap();
        let mut studies = Vec::new();
        let mut oracle = 0.0;
        let params = GroupParams {
            beta: vec![0.5, -0.2, 0.1, 0.7],
            kernel: KernelParams::new(0.9, 1.2, 0.3).unwrap(),
        };
        for k in 0..3 {
            let (s, y, _, _) = random_instance(&mut rng, 4 + k);
            let mean: Vec<f64> = (design_matrix(&spec, &s) * DVector::from_column_slice(&params.beta))
                .iter()
                .copied()
                .collect();
            oracle -= dense_mvn_logpdf(&y, &mean, &cov_matrix(&s, &params.kernel, 0.0));
            studies.push(StudyData::new(format!("{k}"), s.clone(), y.clone(), s, y).unwrap());
        }
        let v = pooled_neg_loglik(&studies, Group::Control, &spec, &params).unwrap();
        assert!((v - oracle).abs() < 1e-8);

        let single = pooled_neg_loglik(&studies[..1], Group::Control, &spec, &params).unwrap();
        let (s, y) = studies[0].group(Group::Control);
        assert_eq!(single, -study_loglik(s, y, &spec, &params).unwrap());

        let doubled: Vec<StudyData> = studies.iter().chain(studies.iter()).cloned().collect();
        let v2 = pooled_neg_loglik(&doubled, Group::Control, &spec, &params).unwrap();
        assert!((v2 - 2.0 * v).abs() < 1e-10 * v.abs());
    }

    #[test]
    fn permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (s, y, spec, params) = random_instance(&mut rng, 9);
        let order = [3, 1, 8, 0, 5, 2, 7, 6, 4];
        let sp: Vec<f64> = order.iter().map(|&i| s[i]).collect();
        let yp: Vec<f64> = order.iter().map(|&i| y[i]).collect();
        let a = study_loglik(&s, &y, &spec, &params).unwrap();
        let b = study_loglik(&sp, &yp, &spec, &params).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn profiled_matches_full_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let spec = BasisSpec::new(3, vec![1.0], (-2.0, 4.0)).unwrap();
        let studies: Vec<StudyData> = (0..3)
            .map(|k| {
                let (s, y, _, _) = random_instance(&mut rng, 8);
                StudyData::new(format!("{k}"), s.clone(), y.clone(), s, y).unwrap()
            })
            .collect();
        let prepared = PreparedGroup::new(&studies, Group::Treated, &spec);
        let eval = prepared.profiled(1.3, 0.4).unwrap();
        let params = GroupParams {
            beta: eval.beta.clone(),
            kernel: KernelParams::new(eval.sigma2, 1.3, 0.4 * eval.sigma2).unwrap(),
        };
        let full = pooled_neg_loglik(&studies, Group::Treated, &spec, &params).unwrap();
        assert!((full - eval.neg_loglik).abs() < 1e-9);
        // concentrated values are optimal: nudging beta or sigma2 can only increase the objective
        let mut nudged = params.clone();
        nudged.beta[0] += 1e-3;
        assert!(pooled_neg_loglik(&studies, Group::Treated, &spec, &nudged).unwrap() > full);
        let mut nudged = params.clone();
        nudged.kernel.sigma2 *= 1.01;
        nudged.kernel.v2 *= 1.01;
        assert!(pooled_neg_loglik(&studies, Group::Treated, &spec, &nudged).unwrap() > full);
    }
}
