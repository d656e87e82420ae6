//! Long-format CSV input, JSON result files, and plot-data CSV output.
//!
//! Input layout: header `study_id,group,s,y`, one row per patient. The new
//! study's rows leave `y` empty.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp_likelihood::{Group, NewStudySurrogates, StudyData};
use crate::inference::PabDiagnostics;
use crate::kernel::{cholesky_cov, KernelParams};
use crate::mle::FittedGroupModel;
use crate::resilience::{predict_mean, ResilienceEstimate};
use crate::rng::{stream, tag};
use crate::spline_basis::{BasisConfig, BasisSpec};

pub const DEFAULT_NEW_STUDY_ID: &str = "new";
pub const PLOT_GRID_POINTS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub studies: Vec<StudyData>,
    pub new_study: Option<NewStudySurrogates>,
    pub source_path: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceChoice {
    None,
    Bootstrap,
    Pab,
}

/// Settings of one `resilience` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub basis: [BasisConfig; 2],
    #[serde(rename = "J")]
    pub j: usize,
    #[serde(rename = "R")]
    pub r: usize,
    pub inference: InferenceChoice,
    pub seed: u64,
    pub output_path: String,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.j == 0 || self.r == 0 {
            return Err(Error::InvalidInput("J and R must be at least 1".into()));
        }
        Ok(())
    }
}

/// Rounds to 10 significant digits.
pub fn sig10(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.9e}").parse().unwrap_or(x)
}

fn sig10_opt(x: Option<f64>) -> Option<f64> {
    x.map(sig10)
}

#[derive(Default)]
struct StudyRows {
    s: [Vec<f64>; 2],
    y: [Vec<Option<f64>>; 2],
}

pub fn load_csv(path: impl AsRef<Path>, new_study_id: Option<&str>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let mut ds = read_csv(file, new_study_id)?;
    ds.source_path = path.display().to_string();
    Ok(ds)
}

pub fn read_csv(input: impl Read, new_study_id: Option<&str>) -> Result<Dataset> {
    let new_id = new_study_id.unwrap_or(DEFAULT_NEW_STUDY_ID);
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
    let header = reader.headers()?.clone();
    let expected = ["study_id", "group", "s", "y"];
    if header.len() != 4 || header.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Parse {
            line: 1,
            column: "header".into(),
            reason: format!("expected 'study_id,group,s,y', found '{}'", header.iter().collect::<Vec<_>>().join(",")),
        });
    }

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, StudyRows> = HashMap::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let err = |column: &str, reason: String| Error::Parse {
            line,
            column: column.into(),
            reason,
        };
        if record.len() != 4 {
            return Err(err("row", format!("expected 4 fields, found {}", record.len())));
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(err("study_id", "empty study id".into()));
        }
        let group = match &record[1] {
            "0" => 0,
            "1" => 1,
            other => return Err(err("group", format!("group must be 0 or 1, found '{other}'"))),
        };
        let s: f64 = record[2]
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| err("s", format!("'{}' is not a finite number", &record[2])))?;
        let y = match &record[3] {
            "" | "NA" => None,
            text => Some(
                text.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err("y", format!("'{text}' is not a finite number")))?,
            ),
        };
        let entry = rows.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            StudyRows::default()
        });
        entry.s[group].push(s);
        entry.y[group].push(y);
    }

    let mut studies = Vec::new();
    let mut new_study = None;
    for id in order {
        let r = rows.remove(&id).expect("recorded id");
        let all: Vec<&Option<f64>> = r.y.iter().flatten().collect();
        let n_missing = all.iter().filter(|y| y.is_none()).count();
        if n_missing > 0 && n_missing < all.len() {
            return Err(Error::MixedNewStudy(id));
        }
        let [s0, s1] = r.s;
        if n_missing == all.len() {
            if id != new_id {
                return Err(Error::InvalidInput(format!(
                    "study '{id}' has no outcomes but is not the new study '{new_id}'"
                )));
            }
            new_study = Some(NewStudySurrogates::new(s0, s1)?);
        } else {
            if id == new_id {
                return Err(Error::InvalidInput(format!("new study '{id}' must not contain outcomes")));
            }
            let [y0, y1] = r.y.map(|v| v.into_iter().map(|y| y.expect("checked")).collect::<Vec<f64>>());
            studies.push(StudyData::new(id, s0, y0, s1, y1)?);
        }
    }
    if studies.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(Dataset {
        studies,
        new_study,
        source_path: String::new(),
    })
}

/// Writes studies (and optionally a new study) in the input layout.
pub fn write_csv<W: Write>(studies: &[StudyData], new: Option<&NewStudySurrogates>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["study_id", "group", "s", "y"])?;
    for st in studies {
        for g in Group::BOTH {
            let (s, y) = st.group(g);
            for (si, yi) in s.iter().zip(y) {
                w.write_record([st.study_id.clone(), g.index().to_string(), si.to_string(), yi.to_string()])?;
            }
        }
    }
    if let Some(new) = new {
        for g in Group::BOTH {
            for si in new.group(g) {
                w.write_record([DEFAULT_NEW_STUDY_ID.to_string(), g.index().to_string(), si.to_string(), String::new()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupFitRecord {
    pub group: u8,
    pub basis: BasisSpec,
    pub beta: Vec<f64>,
    pub sigma2: f64,
    pub theta: f64,
    pub v2: f64,
    pub converged: bool,
    pub neg_loglik: f64,
}

impl GroupFitRecord {
    pub fn from_model(group: Group, m: &FittedGroupModel) -> Self {
        GroupFitRecord {
            group: group.index(),
            basis: BasisSpec {
                interior_knots: m.spec.interior_knots.iter().copied().map(sig10).collect(),
                boundary_knots: (sig10(m.spec.boundary_knots.0), sig10(m.spec.boundary_knots.1)),
                ..m.spec.clone()
            },
            beta: m.params.beta.iter().copied().map(sig10).collect(),
            sigma2: sig10(m.params.kernel.sigma2),
            theta: sig10(m.params.kernel.theta),
            v2: sig10(m.params.kernel.v2),
            converged: m.converged,
            neg_loglik: sig10(m.final_neg_loglik),
        }
    }

    /// Rebuilds a model from a record (values at serialized precision).
    pub fn to_model(&self) -> Result<FittedGroupModel> {
        let kernel = KernelParams::new(self.sigma2, self.theta, self.v2)?;
        let spec = BasisSpec::new(self.basis.degree, self.basis.interior_knots.clone(), self.basis.boundary_knots)?;
        if spec.n_basis() != self.beta.len() {
            return Err(Error::InvalidInput("beta length does not match the basis".into()));
        }
        Ok(FittedGroupModel {
            spec,
            params: crate::gp_likelihood::GroupParams {
                beta: self.beta.clone(),
                kernel,
            },
            converged: self.converged,
            final_neg_loglik: self.neg_loglik,
            n_evals: 0,
        })
    }
}

/// Result file of the `resilience` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub p_hat: f64,
    pub se: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub method: String,
    #[serde(rename = "J")]
    pub j: usize,
    #[serde(rename = "R")]
    pub r: Option<usize>,
    pub seed: u64,
    pub groups: Vec<GroupFitRecord>,
    pub pab_diagnostics: Option<PabDiagnostics>,
    pub warnings: Vec<String>,
}

impl ResultsFile {
    pub fn new(
        estimate: &ResilienceEstimate,
        diagnostics: Option<&PabDiagnostics>,
        models: [&FittedGroupModel; 2],
        replicates: Option<usize>,
        warnings: Vec<String>,
    ) -> Self {
        ResultsFile {
            p_hat: sig10(estimate.p_hat),
            se: sig10_opt(estimate.se),
            ci_lo: sig10_opt(estimate.ci.map(|c| c.0)),
            ci_hi: sig10_opt(estimate.ci.map(|c| c.1)),
            method: estimate.method.as_str().to_string(),
            j: estimate.delta_sample.j,
            r: replicates,
            seed: estimate.delta_sample.seed,
            groups: vec![
                GroupFitRecord::from_model(Group::Control, models[0]),
                GroupFitRecord::from_model(Group::Treated, models[1]),
            ],
            pab_diagnostics: diagnostics.map(|d| PabDiagnostics {
                hessian_cond: sig10(d.hessian_cond),
                grad_norm: sig10(d.grad_norm),
                var_param: sig10(d.var_param),
                var_sb: sig10(d.var_sb),
                fell_back: d.fell_back,
            }),
            warnings,
        }
    }
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let file = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

/// JSON with `p_hat`, `se`, `ci_lo`, `ci_hi`, `method`, `J`, `R`, `seed`,
/// the per-group fitted parameters and warnings.
pub fn emit_results(
    estimate: &ResilienceEstimate,
    diagnostics: Option<&PabDiagnostics>,
    models: [&FittedGroupModel; 2],
    replicates: Option<usize>,
    warnings: Vec<String>,
    path: impl AsRef<Path>,
) -> Result<ResultsFile> {
    let file = ResultsFile::new(estimate, diagnostics, models, replicates, warnings);
    write_json(&file, path)?;
    Ok(file)
}

/// One row of the plot-data CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub group: u8,
    pub curve_id: usize,
    pub s: f64,
    pub value: f64,
}

fn grid(values: &[f64], n: usize) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if n == 1 || lo == hi {
        return vec![lo; n];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Fitted mean (curve 0) and `n_curves` random conditional mean functions
/// per group on a 200-point grid spanning the new study's surrogates.
pub fn plot_rows(
    model0: &FittedGroupModel,
    model1: &FittedGroupModel,
    new: &NewStudySurrogates,
    n_curves: usize,
    seed: u64,
) -> Result<Vec<PlotRow>> {
    use rand::Rng;
    use rand_distr::StandardNormal;

    let mut rows = Vec::new();
    for (g, model) in [(Group::Control, model0), (Group::Treated, model1)] {
        let s = grid(new.group(g), PLOT_GRID_POINTS);
        let mean = predict_mean(model, &s);
        rows.extend(s.iter().zip(&mean).map(|(&s, &v)| PlotRow {
            group: g.index(),
            curve_id: 0,
            s,
            value: v,
        }));
        if n_curves == 0 {
            continue;
        }
        // smooth functions: the kernel's signal part only, noise dropped
        let smooth = KernelParams {
            v2: 0.0,
            ..model.params.kernel
        };
        let (chol, _) = cholesky_cov(&s, &smooth).map_err(|e| e.in_group(g.index()))?;
        let l = chol.l();
        for curve in 1..=n_curves {
            let mut rng = stream(seed, &[tag::PLOT, g.index() as u64, curve as u64]);
            let z = nalgebra::DVector::from_iterator(s.len(), (0..s.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let dev = &l * z;
            rows.extend(s.iter().zip(&mean).zip(dev.iter()).map(|((&s, &m), d)| PlotRow {
                group: g.index(),
                curve_id: curve,
                s,
                value: m + d,
            }));
        }
    }
    Ok(rows)
}

pub fn write_plot_rows<W: Write>(rows: &[PlotRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["group", "curve_id", "s", "value"])?;
    for r in rows {
        w.write_record([
            r.group.to_string(),
            r.curve_id.to_string(),
            format!("{:.9e}", r.s),
            format!("{:.9e}", r.value),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_plot_data(
    model0: &FittedGroupModel,
    model1: &FittedGroupModel,
    new: &NewStudySurrogates,
    n_curves: usize,
    seed: u64,
    path: impl AsRef<Path>,
) -> Result<Vec<PlotRow>> {
    let rows = plot_rows(model0, model1, new, n_curves, seed)?;
    let file = std::fs::File::create(path)?;
    write_plot_rows(&rows, std::io::BufWriter::new(file))?;
    Ok(rows)
}
