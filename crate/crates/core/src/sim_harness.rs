//! Simulation study: data generators for the six settings, Monte Carlo
//! truth, and the Est / ESE / ASE / CP / MV summary table.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::elliott::{compute_study_effects, elliott_prob, fit_bivariate_meta};
use crate::error::{Error, Result};
use crate::gp_likelihood::{Group, NewStudySurrogates, StudyData};
use crate::inference::{bootstrap_from_existing_fits, pab_from_fits, BootstrapOptions};
use crate::kernel::{cholesky_cov, KernelParams};
use crate::mle::{fit_with_configs, FitOptions};
use crate::parallel::par_map;
use crate::resilience::estimate_resilience;
use crate::rng::{derive_seed, stream, tag, StreamRng};
use crate::spline_basis::BasisConfig;
use crate::stats::{mean, sample_sd};

/// Conditional mean functions used by the settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MeanFunction {
    /// `intercept + slope * s`
    Linear { intercept: f64, slope: f64 },
    /// `(s - center)^2 + offset`
    Quadratic { center: f64, offset: f64 },
    /// `constant + a_sin * sin(s) + a_cos * cos(s)`
    Trig { constant: f64, a_sin: f64, a_cos: f64 },
}

impl MeanFunction {
    pub fn eval(&self, s: f64) -> f64 {
        match *self {
            MeanFunction::Linear { intercept, slope } => intercept + slope * s,
            MeanFunction::Quadratic { center, offset } => (s - center) * (s - center) + offset,
            MeanFunction::Trig { constant, a_sin, a_cos } => constant + a_sin * s.sin() + a_cos * s.cos(),
        }
    }
}

/// Normal surrogate distribution given by mean and variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateDist {
    pub mean: f64,
    pub variance: f64,
}

impl SurrogateDist {
    const fn new(mean: f64, variance: f64) -> Self {
        SurrogateDist { mean, variance }
    }

    fn sample(&self, rng: &mut StreamRng, n: usize) -> Vec<f64> {
        let d = Normal::new(self.mean, self.variance.sqrt()).expect("positive variance");
        (0..n).map(|_| d.sample(rng)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSetting {
    pub id: u8,
    pub m0: MeanFunction,
    pub m1: MeanFunction,
    pub gp: KernelParams,
    /// Control and treated surrogate distributions in the completed studies.
    pub s_train_dist: [SurrogateDist; 2],
    /// Control and treated surrogate distributions in the new study.
    pub s_new_dist: [SurrogateDist; 2],
}

impl SimSetting {
    pub fn get(id: u8) -> Result<SimSetting> {
        use MeanFunction::*;
        let gp = KernelParams {
            sigma2: 1.0,
            theta: 5.0,
            v2: 1.0,
        };
        let d = SurrogateDist::new;
        let quad = Quadratic {
            center: 0.5,
            offset: -1.0,
        };
        let line_3s1 = Linear {
            intercept: 1.0,
            slope: 3.0,
        };
        let trig1 = Trig {
            constant: 0.6,
            a_sin: 0.85,
            a_cos: 0.85,
        };
        let setting = match id {
            1 => SimSetting {
                id,
                m0: Linear {
                    intercept: -1.0,
                    slope: 2.0,
                },
                m1: Linear {
                    intercept: 3.0,
                    slope: 1.0,
                },
                gp,
                s_train_dist: [d(3.0, 3.0), d(4.0, 3.0)],
                s_new_dist: [d(4.75, 1.0), d(5.25, 1.0)],
            },
            2 => SimSetting {
                id,
                m0: quad,
                m1: line_3s1,
                gp,
                s_train_dist: [d(0.9, 1.5), d(2.2, 4.5)],
                s_new_dist: [d(-0.7, 1.0), d(-0.2, 2.0)],
            },
            3 => SimSetting {
                id,
                m0: Trig {
                    constant: 0.2,
                    a_sin: 0.4,
                    a_cos: 0.4,
                },
                m1: trig1,
                gp,
                s_train_dist: [d(5.0, 1.0), d(6.0, 2.0)],
                s_new_dist: [d(4.1, 0.5), d(4.1, 0.5)],
            },
            4 => SimSetting {
                id,
                m0: Linear {
                    intercept: 1.0,
                    slope: 1.5,
                },
                m1: Linear {
                    intercept: -2.0,
                    slope: 3.0,
                },
                gp,
                s_train_dist: [d(2.0, 3.0), d(3.0, 3.0)],
                s_new_dist: [d(1.75, 1.0), d(2.75, 1.0)],
            },
            5 => SimSetting {
                id,
                m0: quad,
                m1: line_3s1,
                gp,
                s_train_dist: [d(0.9, 1.5), d(2.2, 4.5)],
                s_new_dist: [d(-0.08, 1.0), d(0.45, 2.0)],
            },
            6 => SimSetting {
                id,
                m0: Trig {
                    constant: 0.2,
                    a_sin: 0.4,
                    a_cos: 0.5,
                },
                m1: trig1,
                gp: KernelParams {
                    sigma2: 0.1,
                    theta: 5.0,
                    v2: 0.5,
                },
                s_train_dist: [d(5.0, 1.0), d(6.0, 2.0)],
                s_new_dist: [d(5.5, 0.5), d(6.5, 0.5)],
            },
            _ => return Err(Error::InvalidInput(format!("unknown setting {id}; expected 1..6"))),
        };
        Ok(setting)
    }

    pub fn mean_fn(&self, g: Group) -> &MeanFunction {
        match g {
            Group::Control => &self.m0,
            Group::Treated => &self.m1,
        }
    }
}

/// Completed studies, new-study surrogates, and the new study's outcomes
/// (hidden from the estimators).
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub studies: Vec<StudyData>,
    pub new_study: NewStudySurrogates,
    pub hidden_y0: Vec<f64>,
    pub hidden_y1: Vec<f64>,
}

/// Outcomes `m_g(S) + L z` with `L L'` the generating covariance at `s`.
fn gp_outcomes(setting: &SimSetting, g: Group, s: &[f64], rng: &mut StreamRng) -> Result<Vec<f64>> {
    let (chol, _) = cholesky_cov(s, &setting.gp)?;
    let z = nalgebra::DVector::from_iterator(s.len(), (0..s.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let dev = chol.l() * z;
    let m = setting.mean_fn(g);
    Ok(s.iter().zip(dev.iter()).map(|(&si, d)| m.eval(si) + d).collect())
}

pub fn generate_dataset(setting: &SimSetting, k: usize, n_per_group: usize, seed: u64) -> Result<GeneratedData> {
    if k == 0 || n_per_group == 0 {
        return Err(Error::InvalidInput("K and n must be at least 1".into()));
    }
    let arm = |study: usize, g: Group, dist: &SurrogateDist| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut rng = stream(seed, &[tag::GENERATE, study as u64, g.index() as u64]);
        let s = dist.sample(&mut rng, n_per_group);
        let y = gp_outcomes(setting, g, &s, &mut rng)?;
        Ok((s, y))
    };
    let mut studies = Vec::with_capacity(k);
    for study in 0..k {
        let (s0, y0) = arm(study, Group::Control, &setting.s_train_dist[0])?;
        let (s1, y1) = arm(study, Group::Treated, &setting.s_train_dist[1])?;
        studies.push(StudyData {
            study_id: format!("study{}", study + 1),
            s0,
            y0,
            s1,
            y1,
        });
    }
    let (s0, hidden_y0) = arm(k, Group::Control, &setting.s_new_dist[0])?;
    let (s1, hidden_y1) = arm(k, Group::Treated, &setting.s_new_dist[1])?;
    Ok(GeneratedData {
        studies,
        new_study: NewStudySurrogates { s0, s1 },
        hidden_y0,
        hidden_y1,
    })
}

/// Monte Carlo probability that a freshly generated new study has a
/// negative difference of arm means.
pub fn true_paradox_prob(setting: &SimSetting, n_new_per_group: usize, n_mc: usize, seed: u64) -> Result<f64> {
    if n_mc < 1000 {
        return Err(Error::InvalidInput("n_mc must be at least 1000".into()));
    }
    let outcomes = par_map(n_mc, |i| -> Result<bool> {
        let mut means = [0.0; 2];
        for g in Group::BOTH {
            let mut rng = stream(seed, &[tag::TRUTH, i as u64, g.index() as u64]);
            let s = setting.s_new_dist[g.index() as usize].sample(&mut rng, n_new_per_group);
            let y = gp_outcomes(setting, g, &s, &mut rng)?;
            means[g.index() as usize] = mean(&y);
        }
        Ok(means[1] - means[0] < 0.0)
    });
    let mut hits = 0usize;
    for o in outcomes {
        hits += o? as usize;
    }
    Ok(hits as f64 / n_mc as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    Linear,
    Cubic,
    CubicSpline,
}

impl Estimator {
    pub fn basis(self) -> BasisConfig {
        match self {
            Estimator::Linear => BasisConfig::linear(),
            Estimator::Cubic => BasisConfig::cubic(),
            Estimator::CubicSpline => BasisConfig::default(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Estimator::Linear => "linear",
            Estimator::Cubic => "cubic",
            Estimator::CubicSpline => "cubic-spline",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Estimator::Linear),
            "cubic" => Ok(Estimator::Cubic),
            "cubic-spline" | "cubic_spline" => Ok(Estimator::CubicSpline),
            _ => Err(Error::InvalidInput(format!("unknown estimator '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceKind {
    Bootstrap,
    Pab,
}

impl std::str::FromStr for InferenceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bootstrap" => Ok(InferenceKind::Bootstrap),
            "pab" => Ok(InferenceKind::Pab),
            _ => Err(Error::InvalidInput(format!("unknown inference procedure '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub setting: u8,
    #[serde(rename = "K")]
    pub k: usize,
    pub n: usize,
    pub iterations: usize,
    pub estimators: Vec<Estimator>,
    /// Each listed procedure runs on every iteration; empty means point
    /// estimates only.
    pub inference: Vec<InferenceKind>,
    #[serde(rename = "J")]
    pub j: usize,
    pub bootstrap: BootstrapOptions,
    pub fit: FitOptions,
    pub truth_mc: usize,
    pub run_elliott: bool,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(setting: u8, k: usize, n: usize, iterations: usize, seed: u64) -> Self {
        SimConfig {
            setting,
            k,
            n,
            iterations,
            estimators: vec![Estimator::CubicSpline],
            inference: Vec::new(),
            j: crate::resilience::DEFAULT_J,
            bootstrap: BootstrapOptions {
                replicates: 100,
                refit_options: FitOptions {
                    n_restarts: 1,
                    rel_tol: 1e-7,
                    ..FitOptions::default()
                },
                ..BootstrapOptions::default()
            },
            fit: FitOptions::default(),
            truth_mc: 20_000,
            run_elliott: true,
            seed,
        }
    }
}

/// Per-iteration outcome of one estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOutcome {
    pub estimator: Estimator,
    pub p_hat: f64,
    /// `(inference, se, ci)` per requested procedure.
    pub intervals: Vec<(InferenceKind, f64, (f64, f64))>,
    pub pab_fell_back: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub outcomes: Vec<EstimatorOutcome>,
    pub mv: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub setting_id: u8,
    pub estimator: Estimator,
    pub inference: Option<InferenceKind>,
    pub truth: f64,
    pub est_mean: f64,
    pub ese: f64,
    pub ase: f64,
    pub coverage: f64,
    pub mv_est: f64,
    pub iterations: usize,
    pub n_failed: usize,
    /// ESE is reported as 0 by convention with a single iteration.
    pub single_iteration: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub config: SimConfig,
    pub truth: f64,
    pub records: Vec<IterationRecord>,
    pub n_failed: usize,
    pub results: Vec<SimResult>,
}

fn run_iteration(cfg: &SimConfig, setting: &SimSetting, i: usize) -> Result<IterationRecord> {
    let seed = derive_seed(cfg.seed, &[tag::ITERATION, i as u64]);
    let data = generate_dataset(setting, cfg.k, cfg.n, seed)?;
    let mut outcomes = Vec::with_capacity(cfg.estimators.len());
    for &est in &cfg.estimators {
        let basis = est.basis();
        let fit_opts = FitOptions {
            seed: derive_seed(seed, &[tag::RESTART]),
            ..cfg.fit.clone()
        };
        let (m0, m1) = fit_with_configs(&data.studies, basis, basis, &fit_opts)?;
        let synth_seed = derive_seed(seed, &[tag::SYNTHETIC]);
        let point = estimate_resilience(&m0, &m1, &data.new_study, cfg.j, synth_seed)?;
        let boot_opts = BootstrapOptions {
            seed: synth_seed,
            ..cfg.bootstrap.clone()
        };
        let mut intervals = Vec::new();
        let mut pab_fell_back = false;
        for &kind in &cfg.inference {
            let est = match kind {
                InferenceKind::Bootstrap => {
                    bootstrap_from_existing_fits(&data.studies, &data.new_study, [basis; 2], [&m0, &m1], cfg.j, &boot_opts)?.estimate
                }
                InferenceKind::Pab => {
                    let (e, diag) = pab_from_fits(&data.studies, &data.new_study, [basis; 2], [&m0, &m1], cfg.j, &boot_opts)?;
                    pab_fell_back |= diag.fell_back;
                    e
                }
            };
            let se = est.se.unwrap_or(f64::NAN);
            let ci = est.ci.unwrap_or((f64::NAN, f64::NAN));
            intervals.push((kind, se, ci));
        }
        outcomes.push(EstimatorOutcome {
            estimator: est,
            p_hat: point.p_hat,
            intervals,
            pab_fell_back,
        });
    }
    let mv = if cfg.run_elliott {
        elliott_estimate(&data).map_err(|e| log::warn!("iteration {i}: comparator failed: {e}")).ok()
    } else {
        None
    };
    Ok(IterationRecord {
        iteration: i,
        outcomes,
        mv,
    })
}

/// Comparator probability for one generated data set.
pub fn elliott_estimate(data: &GeneratedData) -> Result<f64> {
    let effects: Result<Vec<_>> = data.studies.iter().map(compute_study_effects).collect();
    let fit = fit_bivariate_meta(&effects?)?;
    let delta_s_new = mean(&data.new_study.s1) - mean(&data.new_study.s0);
    elliott_prob(&fit, delta_s_new)
}

fn summarize(cfg: &SimConfig, truth: f64, records: &[IterationRecord], n_failed: usize) -> Vec<SimResult> {
    let mvs: Vec<f64> = records.iter().filter_map(|r| r.mv).collect();
    let mv_est = if mvs.is_empty() { f64::NAN } else { mean(&mvs) };
    let single = records.len() == 1;
    let mut out = Vec::new();
    for (e_idx, &est) in cfg.estimators.iter().enumerate() {
        let p: Vec<f64> = records.iter().map(|r| r.outcomes[e_idx].p_hat).collect();
        let est_mean = mean(&p);
        let ese = if single { 0.0 } else { sample_sd(&p) };
        let base = SimResult {
            setting_id: cfg.setting,
            estimator: est,
            inference: None,
            truth,
            est_mean,
            ese,
            ase: f64::NAN,
            coverage: f64::NAN,
            mv_est,
            iterations: records.len(),
            n_failed,
            single_iteration: single,
        };
        if cfg.inference.is_empty() {
            out.push(base);
            continue;
        }
        for (k_idx, &kind) in cfg.inference.iter().enumerate() {
            let ses: Vec<f64> = records.iter().map(|r| r.outcomes[e_idx].intervals[k_idx].1).collect();
            let covers = records
                .iter()
                .filter(|r| {
                    let (lo, hi) = r.outcomes[e_idx].intervals[k_idx].2;
                    lo <= truth && truth <= hi
                })
                .count();
            out.push(SimResult {
                inference: Some(kind),
                ase: mean(&ses),
                coverage: covers as f64 / records.len() as f64,
                ..base.clone()
            });
        }
    }
    out
}

pub fn run_simulation(cfg: &SimConfig) -> Result<SimReport> {
    if cfg.iterations == 0 {
        return Err(Error::InvalidInput("iterations must be at least 1".into()));
    }
    if cfg.estimators.is_empty() {
        return Err(Error::InvalidInput("no estimators requested".into()));
    }
    let setting = SimSetting::get(cfg.setting)?;
    let truth = true_paradox_prob(&setting, cfg.n, cfg.truth_mc, derive_seed(cfg.seed, &[tag::TRUTH]))?;
    let results = par_map(cfg.iterations, |i| run_iteration(cfg, &setting, i));
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut n_failed = 0;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => {
                log::warn!("simulation iteration {i} failed: {e}");
                n_failed += 1;
            }
        }
    }
    if records.is_empty() {
        return Err(Error::OptimizationFailed("every simulation iteration failed".into()));
    }
    let summary = summarize(cfg, truth, &records, n_failed);
    Ok(SimReport {
        config: cfg.clone(),
        truth,
        records,
        n_failed,
        results: summary,
    })
}

/// CSV with columns `setting, estimator, truth, est, ese, ase, cp, mv`.
pub fn write_results_csv<W: Write>(results: &[SimResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["setting", "estimator", "truth", "est", "ese", "ase", "cp", "mv"])?;
    let num = |v: f64| if v.is_nan() { String::new() } else { format!("{v:.6}") };
    for r in results {
        w.write_record([
            r.setting_id.to_string(),
            r.estimator.to_string(),
            num(r.truth),
            num(r.est_mean),
            num(r.ese),
            num(r.ase),
            num(r.coverage),
            num(r.mv_est),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_results_csv(results: &[SimResult], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_results_csv(results, std::io::BufWriter::new(file))
}
