//! Browser bindings: B-spline basis curves, a fitted simulation setting with
//! its resilience estimate, and the comparator probability.
//!
//! Every export returns JSON text so the page needs no extra glue.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use resilience_core::elliott::{elliott_prob, MetaFit};
use resilience_core::mle::fit_with_configs;
use resilience_core::resilience::{estimate_resilience, predict_mean};
use resilience_core::sim_harness::{generate_dataset, Estimator, SimSetting};
use resilience_core::spline_basis::eval_basis;
use resilience_core::{BasisSpec, FitOptions, Group};

#[derive(Debug, Serialize)]
pub struct BasisCurves {
    pub knots: Vec<f64>,
    pub s: Vec<f64>,
    /// One row per basis function.
    pub curves: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize)]
pub struct Arm {
    pub s: Vec<f64>,
    pub y: Vec<f64>,
    pub grid: Vec<f64>,
    pub true_mean: Vec<f64>,
    pub fitted_mean: Vec<f64>,
    pub new_range: (f64, f64),
    pub sigma2: f64,
    pub theta: f64,
    pub v2: f64,
}

#[derive(Debug, Serialize)]
pub struct SettingFit {
    pub arms: Vec<Arm>,
    pub p_hat: f64,
    pub deltas: Vec<f64>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![lo; n];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn range(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)))
}

pub fn basis_curves(degree: usize, n_interior: usize, lo: f64, hi: f64, points: usize) -> Result<BasisCurves, String> {
    let knots: Vec<f64> = (1..=n_interior)
        .map(|i| lo + (hi - lo) * i as f64 / (n_interior + 1) as f64)
        .collect();
    let spec = BasisSpec::new(degree, knots.clone(), (lo, hi)).map_err(|e| e.to_string())?;
    let s = linspace(lo, hi, points.max(2));
    let mut curves = vec![Vec::with_capacity(s.len()); spec.n_basis()];
    for &x in &s {
        for (c, v) in curves.iter_mut().zip(eval_basis(&spec, x)) {
            c.push(v);
        }
    }
    Ok(BasisCurves { knots, s, curves })
}

pub fn fit_setting(setting: u8, k: usize, n: usize, seed: u64, estimator: &str) -> Result<SettingFit, String> {
    let err = |e: resilience_core::Error| e.to_string();
    let est: Estimator = estimator.parse().map_err(err)?;
    let setting = SimSetting::get(setting).map_err(err)?;
    let data = generate_dataset(&setting, k, n, seed).map_err(err)?;
    let opts = FitOptions {
        n_restarts: 1,
        seed,
        ..FitOptions::default()
    };
    let basis = est.basis();
    let (m0, m1) = fit_with_configs(&data.studies, basis, basis, &opts).map_err(err)?;
    let estimate = estimate_resilience(&m0, &m1, &data.new_study, 500, seed).map_err(err)?;

    let mut arms = Vec::new();
    for (g, model) in [(Group::Control, &m0), (Group::Treated, &m1)] {
        let s: Vec<f64> = data.studies.iter().flat_map(|st| st.group(g).0.iter().copied()).collect();
        let y: Vec<f64> = data.studies.iter().flat_map(|st| st.group(g).1.iter().copied()).collect();
        let new_range = range(data.new_study.group(g));
        let (lo, hi) = range(&s);
        let grid = linspace(lo.min(new_range.0), hi.max(new_range.1), 150);
        let truth = setting.mean_fn(g);
        arms.push(Arm {
            true_mean: grid.iter().map(|&x| truth.eval(x)).collect(),
            fitted_mean: predict_mean(model, &grid),
            s,
            y,
            grid,
            new_range,
            sigma2: model.params.kernel.sigma2,
            theta: model.params.kernel.theta,
            v2: model.params.kernel.v2,
        });
    }
    Ok(SettingFit {
        arms,
        p_hat: estimate.p_hat,
        deltas: estimate.delta_sample.deltas,
    })
}

pub fn comparator_probability(beta_s: f64, beta_y: f64, d_aa: f64, d_ab: f64, d_bb: f64, delta_s: f64) -> Result<f64, String> {
    let fit = MetaFit {
        beta_s,
        beta_y,
        d_aa,
        d_ab,
        d_bb,
        neg_loglik: f64::NAN,
    };
    elliott_prob(&fit, delta_s).map_err(|e| e.to_string())
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    let v = r.map_err(|e| JsValue::from_str(&e))?;
    serde_json::to_string(&v).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen(js_name = basisCurves)]
pub fn basis_curves_js(degree: usize, n_interior: usize, lo: f64, hi: f64, points: usize) -> Result<String, JsValue> {
    to_js(basis_curves(degree, n_interior, lo, hi, points))
}

#[wasm_bindgen(js_name = fitSetting)]
pub fn fit_setting_js(setting: u8, k: usize, n: usize, seed: u32, estimator: &str) -> Result<String, JsValue> {
    to_js(fit_setting(setting, k, n, seed as u64, estimator))
}

#[wasm_bindgen(js_name = comparatorProbability)]
pub fn comparator_probability_js(
    beta_s: f64,
    beta_y: f64,
    d_aa: f64,
    d_ab: f64,
    d_bb: f64,
    delta_s: f64,
) -> Result<f64, JsValue> {
    comparator_probability(beta_s, beta_y, d_aa, d_ab, d_bb, delta_s).map_err(|e| JsValue::from_str(&e))
}
