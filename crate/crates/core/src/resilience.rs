//! Synthetic outcomes for the new study and the resilience probability
//! estimate `p_hat = #{j : Delta_j < 0} / J`.
//!
//! For draw `j`, each arm's synthetic outcome vector is
//! `m_hat(S) + L z` with `L L' = RBF(S, S) + v2 I` at the fitted
//! parameters, and `Delta_j` is the difference of the arms' sample means.
//! The standard-normal vectors `z` come from the stream `(seed, arm, j)`, so
//! two estimates with the same seed share their randomness.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp_likelihood::{Group, GroupParams, NewStudySurrogates};
use crate::kernel::cholesky_cov;
use crate::mle::FittedGroupModel;
use crate::parallel::par_map;
use crate::rng::{stream, tag};
use crate::spline_basis::design_matrix;

pub const DEFAULT_J: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDeltaSample {
    pub deltas: Vec<f64>,
    #[serde(rename = "J")]
    pub j: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMethod {
    Point,
    NonparametricBootstrap,
    Pab,
    PabFallbackBootstrap,
}

impl EstimateMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimateMethod::Point => "point",
            EstimateMethod::NonparametricBootstrap => "nonparametric_bootstrap",
            EstimateMethod::Pab => "pab",
            EstimateMethod::PabFallbackBootstrap => "pab_fallback_bootstrap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResilienceEstimate {
    pub p_hat: f64,
    pub delta_sample: SyntheticDeltaSample,
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub method: EstimateMethod,
}

pub fn predict_mean(model: &FittedGroupModel, s_vec: &[f64]) -> Vec<f64> {
    let beta = DVector::from_column_slice(&model.params.beta);
    (design_matrix(&model.spec, s_vec) * beta).iter().copied().collect()
}

/// Mean vector and covariance factor of one arm's synthetic outcomes.
#[derive(Debug, Clone)]
pub struct SyntheticSampler {
    mean: DVector<f64>,
    chol_l: DMatrix<f64>,
    /// `L' 1 / n`: the sample mean of `m + L z` is `mean_of_mean + proj . z`.
    proj: DVector<f64>,
    mean_of_mean: f64,
}

impl SyntheticSampler {
    pub fn new(params: &GroupParams, design: &DMatrix<f64>, s_vec: &[f64]) -> Result<Self> {
        if s_vec.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mean = design * DVector::from_column_slice(&params.beta);
        let (chol, _) = cholesky_cov(s_vec, &params.kernel)?;
        let chol_l = chol.unpack();
        let n = s_vec.len() as f64;
        let proj = chol_l.row_sum().transpose() / n;
        let mean_of_mean = mean.sum() / n;
        Ok(SyntheticSampler {
            mean,
            chol_l,
            proj,
            mean_of_mean,
        })
    }

    pub fn for_model(model: &FittedGroupModel, s_vec: &[f64]) -> Result<Self> {
        Self::new(&model.params, &design_matrix(&model.spec, s_vec), s_vec)
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn draw(&self, rng: &mut impl Rng) -> Vec<f64> {
        let z = DVector::from_iterator(self.len(), (0..self.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        (&self.mean + &self.chol_l * z).iter().copied().collect()
    }

    /// Sample mean of the synthetic outcomes for standard-normal vector `z`.
    #[inline]
    pub fn mean_given(&self, z: &[f64]) -> f64 {
        self.mean_of_mean + self.proj.iter().zip(z).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// One synthetic outcome vector `m_hat + L z` for the given surrogates.
pub fn draw_synthetic_outcomes(model: &FittedGroupModel, s_vec: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
    Ok(SyntheticSampler::for_model(model, s_vec)?.draw(rng))
}

/// Standard-normal vectors for `J` draws in each arm, from the streams
/// `(seed, arm, j)`. Reusing one set across parameter values gives common
/// random numbers.
#[derive(Debug, Clone)]
pub struct SyntheticDraws {
    n0: usize,
    n1: usize,
    j: usize,
    seed: u64,
    z0: Vec<f64>,
    z1: Vec<f64>,
}

fn normals(seed: u64, group: Group, j: usize, n: usize) -> Vec<f64> {
    let mut rng = stream(seed, &[tag::SYNTHETIC, group.index() as u64, j as u64]);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

impl SyntheticDraws {
    pub fn new(n0: usize, n1: usize, j: usize, seed: u64) -> Self {
        let rows = par_map(j, |idx| (normals(seed, Group::Control, idx, n0), normals(seed, Group::Treated, idx, n1)));
        let mut z0 = Vec::with_capacity(j * n0);
        let mut z1 = Vec::with_capacity(j * n1);
        for (a, b) in rows {
            z0.extend(a);
            z1.extend(b);
        }
        SyntheticDraws { n0, n1, j, seed, z0, z1 }
    }

    pub fn j(&self) -> usize {
        self.j
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn deltas(&self, sampler0: &SyntheticSampler, sampler1: &SyntheticSampler) -> Vec<f64> {
        assert_eq!(sampler0.len(), self.n0);
        assert_eq!(sampler1.len(), self.n1);
        (0..self.j)
            .map(|idx| {
                let z0 = &self.z0[idx * self.n0..(idx + 1) * self.n0];
                let z1 = &self.z1[idx * self.n1..(idx + 1) * self.n1];
                sampler1.mean_given(z1) - sampler0.mean_given(z0)
            })
            .collect()
    }
}

pub fn fraction_negative(deltas: &[f64]) -> f64 {
    deltas.iter().filter(|&&d| d < 0.0).count() as f64 / deltas.len() as f64
}

/// `p_hat` as a function of both arms' parameters for fixed new-study
/// surrogates and fixed draws.
#[derive(Debug, Clone)]
pub struct ResilienceEvaluator {
    s0: Vec<f64>,
    s1: Vec<f64>,
    design0: DMatrix<f64>,
    design1: DMatrix<f64>,
    draws: SyntheticDraws,
}

impl ResilienceEvaluator {
    pub fn new(model0: &FittedGroupModel, model1: &FittedGroupModel, new: &NewStudySurrogates, j: usize, seed: u64) -> Self {
        ResilienceEvaluator {
            s0: new.s0.clone(),
            s1: new.s1.clone(),
            design0: design_matrix(&model0.spec, &new.s0),
            design1: design_matrix(&model1.spec, &new.s1),
            draws: SyntheticDraws::new(new.s0.len(), new.s1.len(), j, seed),
        }
    }

    pub fn deltas(&self, p0: &GroupParams, p1: &GroupParams) -> Result<Vec<f64>> {
        let a = SyntheticSampler::new(p0, &self.design0, &self.s0).map_err(|e| e.in_group(0))?;
        let b = SyntheticSampler::new(p1, &self.design1, &self.s1).map_err(|e| e.in_group(1))?;
        Ok(self.draws.deltas(&a, &b))
    }

    pub fn p_hat(&self, p0: &GroupParams, p1: &GroupParams) -> Result<f64> {
        Ok(fraction_negative(&self.deltas(p0, p1)?))
    }
}

/// Point estimate of the resilience probability from `j` synthetic
/// treatment effects.
pub fn estimate_resilience(
    model0: &FittedGroupModel,
    model1: &FittedGroupModel,
    new: &NewStudySurrogates,
    j: usize,
    seed: u64,
) -> Result<ResilienceEstimate> {
    if j == 0 {
        return Err(Error::InvalidInput("J must be at least 1".into()));
    }
    let eval = ResilienceEvaluator::new(model0, model1, new, j, seed);
    let deltas = eval.deltas(&model0.params, &model1.params)?;
    Ok(ResilienceEstimate {
        p_hat: fraction_negative(&deltas),
        delta_sample: SyntheticDeltaSample { deltas, j, seed },
        se: None,
        ci: None,
        method: EstimateMethod::Point,
    })
}
