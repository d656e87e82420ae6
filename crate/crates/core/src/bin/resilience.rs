use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use resilience_core::elliott::{compute_study_effects, elliott_prob, fit_bivariate_meta, MetaFit};
use resilience_core::inference::{bootstrap_from_existing_fits, pab_from_fits, BootstrapOptions};
use resilience_core::io::{self, GroupFitRecord, InferenceChoice, RunConfig};
use resilience_core::mle::fit_with_configs;
use resilience_core::resilience::estimate_resilience;
use resilience_core::sim_harness::{run_simulation, save_results_csv, Estimator, InferenceKind, SimConfig};
use resilience_core::stats::mean;
use resilience_core::{BasisConfig, Error, FitOptions, Group, Result};

#[derive(Parser)]
#[command(name = "resilience", version, about = "Surrogate paradox probability for a new study")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the per-group models and write their parameters as JSON.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        basis: BasisArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the resilience probability for the new study.
    Resilience {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        basis: BasisArgs,
        #[arg(long = "J", default_value_t = 500)]
        j: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        inference: Option<InferenceKind>,
        #[arg(long = "R", default_value_t = 200)]
        r: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bivariate meta-analysis comparator.
    Elliott {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a simulation setting and write the summary table as CSV.
    Simulate {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=6))]
        setting: u8,
        #[arg(long = "K", default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long, default_value = "cubic-spline", value_delimiter = ',')]
        estimator: Vec<Estimator>,
        #[arg(long, value_delimiter = ',')]
        inference: Vec<InferenceKind>,
        #[arg(long = "J", default_value_t = 500)]
        j: usize,
        #[arg(long = "R", default_value_t = 100)]
        r: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fitted mean and random conditional mean curves on a grid, as CSV.
    PlotData {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        basis: BasisArgs,
        #[arg(long, default_value_t = 20)]
        curves: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    /// Study id of the new study (rows with empty y).
    #[arg(long = "new-study")]
    new_study: Option<String>,
}

#[derive(Args)]
struct BasisArgs {
    #[arg(long = "group-basis", default_value = "cubic-spline")]
    group_basis: Estimator,
    /// Interior knots of the cubic spline.
    #[arg(long)]
    knots: Option<usize>,
}

impl BasisArgs {
    fn config(&self) -> BasisConfig {
        let base = self.group_basis.basis();
        match self.knots {
            Some(n) => BasisConfig { n_interior: n, ..base },
            None => base,
        }
    }
}

#[derive(Serialize)]
struct FitFile {
    source: String,
    groups: Vec<GroupFitRecord>,
}

#[derive(Serialize)]
struct ElliottFile {
    source: String,
    fit: MetaFit,
    delta_s_new: Option<f64>,
    p_e: Option<f64>,
}

fn load(args: &DataArgs) -> Result<io::Dataset> {
    io::load_csv(&args.data, args.new_study.as_deref())
}

fn require_new(ds: &io::Dataset) -> Result<&resilience_core::NewStudySurrogates> {
    ds.new_study
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("the data contain no new study (rows with empty y)".into()))
}

fn fit_warnings(models: [&resilience_core::FittedGroupModel; 2]) -> Vec<String> {
    Group::BOTH
        .iter()
        .zip(models)
        .filter(|(_, m)| !m.converged)
        .map(|(g, _)| format!("group {} fit did not converge", g.index()))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit { data, basis, out } => {
            let ds = load(&data)?;
            let cfg = basis.config();
            let (m0, m1) = fit_with_configs(&ds.studies, cfg, cfg, &FitOptions::default())?;
            let file = FitFile {
                source: ds.source_path,
                groups: vec![
                    GroupFitRecord::from_model(Group::Control, &m0),
                    GroupFitRecord::from_model(Group::Treated, &m1),
                ],
            };
            io::write_json(&file, out)
        }
        Command::Resilience {
            data,
            basis,
            j,
            seed,
            inference,
            r,
            out,
        } => {
            let run = RunConfig {
                basis: [basis.config(); 2],
                j,
                r,
                inference: match inference {
                    None => InferenceChoice::None,
                    Some(InferenceKind::Bootstrap) => InferenceChoice::Bootstrap,
                    Some(InferenceKind::Pab) => InferenceChoice::Pab,
                },
                seed,
                output_path: out.display().to_string(),
            };
            run.validate()?;
            let ds = load(&data)?;
            let new = require_new(&ds)?;
            let fit_opts = FitOptions {
                seed,
                ..FitOptions::default()
            };
            let (m0, m1) = fit_with_configs(&ds.studies, run.basis[0], run.basis[1], &fit_opts)?;
            let mut warnings = fit_warnings([&m0, &m1]);
            let boot = BootstrapOptions {
                replicates: r,
                seed,
                ..BootstrapOptions::default()
            };
            let (estimate, diagnostics, replicates) = match run.inference {
                InferenceChoice::None => (estimate_resilience(&m0, &m1, new, j, seed)?, None, None),
                InferenceChoice::Bootstrap => {
                    let report = bootstrap_from_existing_fits(&ds.studies, new, run.basis, [&m0, &m1], j, &boot)?;
                    if report.n_failed > 0 {
                        warnings.push(format!("{} of {} bootstrap replicates failed", report.n_failed, r));
                    }
                    (report.estimate, None, Some(r))
                }
                InferenceChoice::Pab => {
                    let (e, d) = pab_from_fits(&ds.studies, new, run.basis, [&m0, &m1], j, &boot)?;
                    if d.fell_back {
                        warnings.push("PAB variance unusable; fell back to the nonparametric bootstrap".into());
                    }
                    (e, Some(d), Some(r))
                }
            };
            io::emit_results(&estimate, diagnostics.as_ref(), [&m0, &m1], replicates, warnings, out)?;
            Ok(())
        }
        Command::Elliott { data, out } => {
            let ds = load(&data)?;
            let effects = ds.studies.iter().map(compute_study_effects).collect::<Result<Vec<_>>>()?;
            let fit = fit_bivariate_meta(&effects)?;
            let delta_s_new = ds.new_study.as_ref().map(|n| mean(&n.s1) - mean(&n.s0));
            let p_e = delta_s_new.map(|d| elliott_prob(&fit, d)).transpose()?;
            let file = ElliottFile {
                source: ds.source_path,
                fit: MetaFit {
                    beta_s: io::sig10(fit.beta_s),
                    beta_y: io::sig10(fit.beta_y),
                    d_aa: io::sig10(fit.d_aa),
                    d_ab: io::sig10(fit.d_ab),
                    d_bb: io::sig10(fit.d_bb),
                    neg_loglik: io::sig10(fit.neg_loglik),
                },
                delta_s_new: delta_s_new.map(io::sig10),
                p_e: p_e.map(io::sig10),
            };
            io::write_json(&file, out)
        }
        Command::Simulate {
            setting,
            k,
            n,
            iters,
            estimator,
            inference,
            j,
            r,
            seed,
            out,
        } => {
            let mut cfg = SimConfig::new(setting, k, n, iters, seed);
            cfg.estimators = estimator;
            cfg.inference = inference;
            cfg.j = j;
            cfg.bootstrap.replicates = r;
            let report = run_simulation(&cfg)?;
            if report.n_failed > 0 {
                log::warn!("{} of {} iterations failed", report.n_failed, iters);
            }
            save_results_csv(&report.results, &out)
        }
        Command::PlotData {
            data,
            basis,
            curves,
            seed,
            out,
        } => {
            let ds = load(&data)?;
            let new = require_new(&ds)?;
            let cfg = basis.config();
            let fit_opts = FitOptions {
                seed,
                ..FitOptions::default()
            };
            let (m0, m1) = fit_with_configs(&ds.studies, cfg, cfg, &fit_opts)?;
            io::emit_plot_data(&m0, &m1, new, curves, seed, out)?;
            Ok(())
        }
    }
}

fn configure_threads() {
    #[cfg(feature = "parallel")]
    if let Some(n) = std::env::var("RESILIENCE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("could not configure {n} threads: {e}");
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    configure_threads();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
