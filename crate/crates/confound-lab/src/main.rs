//! Command-line front end: simulate correlated random fields, estimate the
//! structural slope from saved samples, classify estimability regions, and
//! drive full Monte Carlo experiments with CSV/JSON outputs.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use confound_core::covmodels::{MaternParams, ModelSpec};
use confound_core::estimability::{recommend, region_map, write_region_csv, NuXwRule};
use confound_core::estimators::EstimatorSpec;
use confound_core::fields::{
    build_sampler, make_design, read_sample_csv, write_sample_csv, Design, DesignSpec,
    FieldSample, SampleOptions,
};
use confound_core::harness::{
    emit, full_2d_sizes, preset, preset_names, rate_check, results_csv, run_experiment,
    DesignRule, ExperimentConfig,
};
use confound_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "confound-lab",
    version,
    about = "Simulation lab for slope estimation between correlated random fields under spatial confounding"
)]
struct Cli {
    /// Worker threads for replicate-level parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Draw one replicate of a scenario and write sample.csv + sample.meta.json.
    Simulate {
        /// Experiment config JSON (mutually exclusive with --preset).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Named built-in scenario; see `list-presets`.
        #[arg(long)]
        preset: Option<String>,
        /// Replicate seed (default: the config's base_seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Which entry of the config's size list to instantiate (default: first).
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Estimate the slope from a sample CSV (one summary row + JSON report).
    Estimate {
        /// Sample CSV as written by `simulate`.
        #[arg(long)]
        input: PathBuf,
        /// Sample metadata sidecar; without it the design is inferred from
        /// the coordinates.
        #[arg(long)]
        meta: Option<PathBuf>,
        /// ols | ols_diff | ols_lap | avg_then_diff | spacing_weighted_first |
        /// spacing_weighted_second | gls_exp | gls_matern | gls_matern_fitted |
        /// two_stage
        #[arg(long)]
        estimator: String,
        /// Difference/Laplacian order where applicable.
        #[arg(long)]
        order: Option<usize>,
        /// Exponential working-covariance decay rate for gls_exp
        /// (omit to profile it from the residuals).
        #[arg(long)]
        lambda: Option<f64>,
        /// Matern working-covariance parameters for gls_matern, as JSON
        /// {"sigma2":..,"rho":..,"nu":..}.
        #[arg(long)]
        working_cov: Option<String>,
        /// Coarse subsampling stride for two_stage.
        #[arg(long, default_value_t = 4)]
        coarse_stride: usize,
        /// Also write estimate.csv and estimate.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify slope estimability over a (nu_x, nu_w) grid; writes region.csv.
    Region {
        #[arg(long, default_value_t = 1)]
        d: usize,
        /// Grid as start:stop:step.
        #[arg(long, default_value = "0.25:3.0:0.25")]
        nu_x_range: String,
        #[arg(long, default_value = "0.25:3.0:0.25")]
        nu_w_range: String,
        /// Cross-smoothness rule: "mean", "x+<gap>", or a fixed number.
        #[arg(long, default_value = "x+0.25")]
        nu_xw_rule: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Estimate increment exponents from a sample and suggest an estimator.
    Recommend {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        meta: Option<PathBuf>,
    },
    /// Run a Monte Carlo experiment; prints the summary table and writes
    /// results.csv, long.csv, and meta.json.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        /// Override the config's base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's replicate count.
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extend 2D grids to the full N = 10000 study size.
        #[arg(long)]
        full_2d: bool,
    },
    /// Run an experiment and fit its log SD convergence rate against theory.
    RateCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        reps: Option<usize>,
        /// Estimator id whose SDs are fitted.
        #[arg(long, default_value = "ols_lap")]
        estimator: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        full_2d: bool,
    },
    /// List the built-in scenario names.
    ListPresets,
}

/// Sidecar written next to sample.csv so `estimate` and `recommend` can
/// rebuild the exact design and know the generating model.
#[derive(Serialize, Deserialize)]
struct SampleMeta {
    scenario: String,
    model: ModelSpec,
    design: DesignSpec,
    beta: Vec<f64>,
    seed: u64,
    sample_options: SampleOptions,
}

fn main() {
    // Die quietly when a downstream pipe closes (e.g. `... | head`) instead
    // of panicking on the failed print.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        // Only affects builds with the parallel feature; harmless otherwise.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn load_config(config: &Option<PathBuf>, preset_name: &Option<String>) -> Result<ExperimentConfig> {
    match (config, preset_name) {
        (Some(path), None) => ExperimentConfig::from_json(&read_file(path)?),
        (None, Some(name)) => preset(name),
        _ => Err(Error::Config(
            "provide exactly one of --config or --preset".into(),
        )),
    }
}

fn apply_overrides(
    cfg: &mut ExperimentConfig,
    seed: Option<u64>,
    reps: Option<usize>,
    full_2d: bool,
) -> Result<()> {
    if let Some(s) = seed {
        cfg.base_seed = s;
    }
    if let Some(r) = reps {
        cfg.n_replicates = r;
    }
    if full_2d {
        if !matches!(cfg.design, DesignRule::Grid2d { .. }) {
            return Err(Error::Config("--full-2d applies to 2D grid scenarios".into()));
        }
        cfg.sizes = full_2d_sizes();
    }
    cfg.validate()
}

/// Load a sample plus (optionally) its metadata sidecar.
fn load_sample(input: &Path, meta: &Option<PathBuf>) -> Result<(FieldSample, Option<SampleMeta>)> {
    let meta: Option<SampleMeta> = match meta {
        Some(p) => Some(serde_json::from_str(&read_file(p)?)?),
        None => None,
    };
    let design: Option<Design> = match &meta {
        Some(m) => Some(make_design(&m.design)?),
        None => None,
    };
    Ok((read_sample_csv(input, design)?, meta))
}

fn parse_range(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    let err = || Error::Config(format!("range '{s}' must be start:stop:step"));
    if parts.len() != 3 {
        return Err(err());
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.parse::<f64>().map_err(|_| err()))
        .collect::<Result<_>>()?;
    let (start, stop, step) = (nums[0], nums[1], nums[2]);
    if !(step > 0.0) || stop < start {
        return Err(err());
    }
    let mut vals = Vec::new();
    let mut k = 0usize;
    loop {
        let v = start + k as f64 * step;
        if v > stop + 1e-12 {
            break;
        }
        vals.push(v);
        k += 1;
    }
    Ok(vals)
}

fn estimator_from_flags(
    name: &str,
    order: Option<usize>,
    lambda: Option<f64>,
    working_cov: &Option<String>,
    coarse_stride: usize,
) -> Result<EstimatorSpec> {
    let matern_params = |required: bool| -> Result<MaternParams> {
        match working_cov {
            Some(json) => {
                let p: MaternParams = serde_json::from_str(json)?;
                p.validate()?;
                Ok(p)
            }
            None if required => Err(Error::Config(
                "gls_matern needs --working-cov '{\"sigma2\":..,\"rho\":..,\"nu\":..}'".into(),
            )),
            // The fitted profile searches from scratch; the start point is
            // only a placeholder.
            None => Ok(MaternParams {
                sigma2: 1.0,
                rho: 0.2,
                nu: 1.0,
            }),
        }
    };
    Ok(match name {
        "ols" => EstimatorSpec::Ols,
        "ols_diff" => EstimatorSpec::OlsDiff {
            p: order.unwrap_or(1),
        },
        "ols_lap" => EstimatorSpec::OlsLap {
            m: order.unwrap_or(1),
        },
        "avg_then_diff" => EstimatorSpec::AvgThenDiff {
            p: order.unwrap_or(1),
        },
        "spacing_weighted_first" => EstimatorSpec::SpacingWeightedFirst,
        "spacing_weighted_second" => EstimatorSpec::SpacingWeightedSecond,
        "gls_exp" => EstimatorSpec::GlsExp { lambda },
        "gls_matern" => EstimatorSpec::GlsMatern {
            params: matern_params(true)?,
            fitted: false,
        },
        "gls_matern_fitted" => EstimatorSpec::GlsMatern {
            params: matern_params(false)?,
            fitted: true,
        },
        "two_stage" => EstimatorSpec::TwoStage {
            p: order.unwrap_or(1),
            coarse_stride,
        },
        other => {
            return Err(Error::Config(format!("unknown estimator '{other}'")));
        }
    })
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Simulate {
            config,
            preset,
            seed,
            size,
            out,
        } => {
            let cfg = load_config(&config, &preset)?;
            let size = match size {
                Some(s) if cfg.sizes.contains(&s) => s,
                Some(s) => {
                    return Err(Error::Config(format!(
                        "size {s} is not in the scenario's size list {:?}",
                        cfg.sizes
                    )))
                }
                None => cfg.sizes[0],
            };
            let seed = seed.unwrap_or(cfg.base_seed);
            let design_spec = cfg.design.design_spec(size)?;
            let design = std::sync::Arc::new(make_design(&design_spec)?);
            let model = cfg.model.build()?;
            let sampler = build_sampler(&model, design, &cfg.beta, cfg.sample_options.clone())?;
            let sample = sampler.draw(seed);
            ensure_dir(&out)?;
            let csv_path = out.join("sample.csv");
            write_sample_csv(&csv_path, &sample)?;
            let meta = SampleMeta {
                scenario: cfg.scenario.clone(),
                model: cfg.model.clone(),
                design: design_spec,
                beta: cfg.beta.clone(),
                seed,
                sample_options: cfg.sample_options.clone(),
            };
            let meta_path = out.join("sample.meta.json");
            write_file(&meta_path, &serde_json::to_string_pretty(&meta)?)?;
            println!("wrote {} and {}", csv_path.display(), meta_path.display());
            Ok(())
        }
        Cmd::Estimate {
            input,
            meta,
            estimator,
            order,
            lambda,
            working_cov,
            coarse_stride,
            out,
        } => {
            let (sample, _) = load_sample(&input, &meta)?;
            let spec = estimator_from_flags(&estimator, order, lambda, &working_cov, coarse_stride)?;
            let prepared = spec.prepare(&sample.design)?;
            let report = prepared.run(&sample)?;
            let mut csv = String::from("estimator,order,beta_hat,beta2_hat,n_effective\n");
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                report.estimator_id,
                report.order,
                report.beta_hat,
                report
                    .beta2_hat
                    .map(|b| b.to_string())
                    .unwrap_or_default(),
                report.n_effective
            ));
            let json = serde_json::to_string_pretty(&report)?;
            print!("{csv}");
            println!("{json}");
            if let Some(dir) = out {
                ensure_dir(&dir)?;
                write_file(&dir.join("estimate.csv"), &csv)?;
                write_file(&dir.join("estimate.json"), &json)?;
            }
            Ok(())
        }
        Cmd::Region {
            d,
            nu_x_range,
            nu_w_range,
            nu_xw_rule,
            out,
        } => {
            if d != 1 && d != 2 {
                return Err(Error::Config("--d must be 1 or 2".into()));
            }
            let nu_x = parse_range(&nu_x_range)?;
            let nu_w = parse_range(&nu_w_range)?;
            let rule = NuXwRule::parse(&nu_xw_rule)?;
            let cells = region_map(d, &nu_x, &nu_w, rule);
            ensure_dir(&out)?;
            let path = out.join("region.csv");
            let file = fs::File::create(&path).map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            write_region_csv(file, &cells)?;
            let estimable = cells.iter().filter(|c| c.status == "estimable").count();
            println!(
                "wrote {} ({} cells, {} estimable)",
                path.display(),
                cells.len(),
                estimable
            );
            Ok(())
        }
        Cmd::Recommend { input, meta } => {
            let (sample, _) = load_sample(&input, &meta)?;
            let rec = recommend(&sample)?;
            println!("{}", serde_json::to_string_pretty(&rec)?);
            Ok(())
        }
        Cmd::Experiment {
            config,
            preset,
            seed,
            reps,
            out,
            full_2d,
        } => {
            let mut cfg = load_config(&config, &preset)?;
            apply_overrides(&mut cfg, seed, reps, full_2d)?;
            let result = run_experiment(&cfg)?;
            let rows = result.summaries()?;
            print!("{}", results_csv(&rows));
            let dir = output_dir(&cfg, out);
            let files = emit(&result, &[], &dir)?;
            eprintln!(
                "wrote {}, {}, {}",
                files.results.display(),
                files.long.display(),
                files.meta.display()
            );
            Ok(())
        }
        Cmd::RateCheck {
            config,
            preset,
            seed,
            reps,
            estimator,
            out,
            full_2d,
        } => {
            let mut cfg = load_config(&config, &preset)?;
            apply_overrides(&mut cfg, seed, reps, full_2d)?;
            let result = run_experiment(&cfg)?;
            let fit = rate_check(&result, &estimator)?;
            println!(
                "{}: gamma_hat = {:.4}, gamma_theory = {:.4}, gap = {:+.4}",
                fit.scenario, fit.gamma_hat, fit.gamma_theory, fit.gap
            );
            let dir = output_dir(&cfg, out);
            let files = emit(&result, std::slice::from_ref(&fit), &dir)?;
            if let Some(rate) = files.rate {
                eprintln!("wrote {} and {}", files.results.display(), rate.display());
            }
            Ok(())
        }
        Cmd::ListPresets => {
            for name in preset_names() {
                println!("{name}");
            }
            Ok(())
        }
    }
}

fn output_dir(cfg: &ExperimentConfig, cli_out: Option<PathBuf>) -> PathBuf {
    cli_out
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out").join(&cfg.scenario))
}
