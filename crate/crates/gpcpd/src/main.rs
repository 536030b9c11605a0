// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end: detection runs on CSV data, price-series runs,
//! synthetic simulation and the Monte Carlo experiment tables.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gpcpd::calibrate::CalibrationMode;
use gpcpd::config::{FileConfig, IndexRange, PipelineConfig, RhoMode};
use gpcpd::dataset::{load_csv, load_price_csv, sde_transform, synth_generate, Dataset, SyntheticSpec};
use gpcpd::detect::detect_multiple;
use gpcpd::error::Error;
use gpcpd::experiments::{
    localization_rmse, multiscale_table, power_curve, type1_experiment, write_manifest,
    write_table, ExperimentSpec, Table,
};
use gpcpd::report::{write_calibration, write_detection_report, RunMeta};
use gpcpd::with_thread_cap;

#[derive(Parser)]
#[command(
    name = "gpcpd",
    version,
    about = "Nonparametric change-point detection in regression via \
             Gaussian-process likelihood ratios with bootstrap calibration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect breaks in a regression CSV (multi-break, recursive).
    Detect {
        /// Input CSV with header row.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Covariate column names, comma-separated.
        #[arg(long, value_delimiter = ',')]
        covariates: Option<Vec<String>>,
        /// Response column name.
        #[arg(long)]
        response: Option<String>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Detect drift breaks in a price series via relative increments.
    Sde {
        /// Input CSV with a price column (and optionally a date column).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        price_column: Option<String>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Generate a synthetic sine dataset and run detection on it.
    Simulate {
        /// Number of observations.
        #[arg(long, default_value_t = 800)]
        n: usize,
        /// Break index (1-based); omit for a no-break dataset.
        #[arg(long)]
        tau: Option<usize>,
        /// Post-break phase shift in radians.
        #[arg(long, default_value_t = 0.0)]
        phi: f64,
        #[arg(long, default_value_t = 0.1)]
        noise_sd: f64,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Monte Carlo experiment tables (rates, power, localization, windows).
    Experiment {
        #[arg(long, value_enum)]
        kind: ExperimentKind,
        /// Repetitions per configuration.
        #[arg(long, default_value_t = 200)]
        runs: usize,
        /// Phase shifts, comma-separated radians.
        #[arg(long, value_delimiter = ',')]
        phis: Option<Vec<f64>>,
        /// Window sets: sizes comma-separated, sets semicolon-separated,
        /// e.g. "40;40,20;40,20,10".
        #[arg(long)]
        window_sets: Option<String>,
        #[arg(long, default_value_t = 800)]
        n: usize,
        /// True break index for alternatives.
        #[arg(long, default_value_t = 700)]
        tau: usize,
        #[arg(long, default_value_t = 0.1)]
        noise_sd: f64,
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExperimentKind {
    Type1,
    Power,
    Rmse,
    Multiscale,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    PerCell,
    Simplified,
}

impl From<ModeArg> for CalibrationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::PerCell => CalibrationMode::PerCell,
            ModeArg::Simplified => CalibrationMode::Simplified,
        }
    }
}

#[derive(Args)]
struct CommonArgs {
    /// Config file (TOML); explicit flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Significance level in (0, 1).
    #[arg(long)]
    alpha: Option<f64>,
    /// Window sizes, comma-separated, e.g. 40,20,10.
    #[arg(long, value_delimiter = ',')]
    windows: Option<Vec<usize>>,
    /// Bootstrap index range, e.g. 1:500.
    #[arg(long)]
    iboot: Option<IndexRange>,
    /// Bootstrap replicate count.
    #[arg(long)]
    reps: Option<usize>,
    /// Master seed; falls back to GPCPD_SEED, then 0.
    #[arg(long, env = "GPCPD_SEED")]
    seed: Option<u64>,
    /// Critical-level mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Regularization: learned, sobolev:B,aleph or hoelder:B,aleph.
    #[arg(long)]
    rho: Option<RhoMode>,
    /// Re-run evidence maximization on every recursion segment.
    #[arg(long)]
    refit_segments: bool,
    /// Smallest admissible bootstrap set in the recursion.
    #[arg(long)]
    min_iboot: Option<usize>,
    /// Worker-thread cap (results are independent of this).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Resolved {
    pipeline: PipelineConfig,
    file: FileConfig,
    out_dir: PathBuf,
}

fn resolve(common: &CommonArgs) -> Result<Resolved, Error> {
    let file = match &common.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let defaults = PipelineConfig::default();
    let pipeline = PipelineConfig {
        alpha: common.alpha.or(file.alpha).unwrap_or(defaults.alpha),
        windows: common
            .windows
            .clone()
            .or_else(|| file.windows.clone())
            .unwrap_or(defaults.windows),
        iboot: common.iboot.or(file.iboot),
        replicates: common.reps.or(file.reps).unwrap_or(defaults.replicates),
        seed: common.seed.or(file.seed).unwrap_or(defaults.seed),
        mode: common
            .mode
            .map(CalibrationMode::from)
            .or(file.mode)
            .unwrap_or(defaults.mode),
        rho: common.rho.or(file.rho).unwrap_or(defaults.rho),
        refit_segments: common.refit_segments || file.refit_segments.unwrap_or(false),
        min_iboot: common
            .min_iboot
            .or(file.min_iboot)
            .unwrap_or(defaults.min_iboot),
        kernel: file.kernel,
        evidence_starts: file.evidence_starts.unwrap_or(defaults.evidence_starts),
        evidence_max_iterations: file
            .evidence_max_iterations
            .unwrap_or(defaults.evidence_max_iterations),
        threads: common.threads.or(file.threads),
    };
    let out_dir = common
        .out
        .clone()
        .or_else(|| file.out.clone())
        .unwrap_or_else(|| PathBuf::from("gpcpd-out"));
    Ok(Resolved {
        pipeline,
        file,
        out_dir,
    })
}

fn run_detection(
    data: &Dataset,
    config: &PipelineConfig,
    command: &str,
    out_dir: &Path,
    dates: Option<&[String]>,
) -> Result<bool, Error> {
    config.validate(data.len())?;
    let result = with_thread_cap(config.threads, || detect_multiple(data, config))?;

    std::fs::create_dir_all(out_dir)?;
    let meta = RunMeta {
        command,
        config,
        iboot: config.effective_iboot(data.len())?,
        data_len: data.len(),
        data_dim: data.dim(),
        dates,
    };
    let mut report_file = File::create(out_dir.join("report.txt"))?;
    write_detection_report(&mut report_file, &meta, &result)?;
    for (i, segment) in result.segments.iter().enumerate() {
        let mut cal = File::create(out_dir.join(format!("calibration_seg{}.txt", i + 1)))?;
        write_calibration(&mut cal, i + 1, &segment.calibration)?;
        let field = File::create(out_dir.join(format!("statfield_seg{}.csv", i + 1)))?;
        segment.field.write_csv(field)?;
    }

    if result.breaks.is_empty() {
        println!("no break detected (alpha = {})", config.alpha);
    } else {
        for (i, b) in result.breaks.iter().enumerate() {
            let date = dates
                .and_then(|d| d.get(b.change_point - 1))
                .map(|d| format!(" ({d})"))
                .unwrap_or_default();
            println!(
                "break {}: index {}{} (earliest window {}, first exceedance {})",
                i + 1,
                b.change_point,
                date,
                b.n_star,
                b.tau_tilde
            );
        }
    }
    println!("report written to {}", out_dir.join("report.txt").display());
    Ok(!result.breaks.is_empty())
}

fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<(), Error> {
    let mut f = File::create(path)?;
    let header: Vec<String> = (0..data.dim()).map(|d| format!("x{}", d + 1)).collect();
    writeln!(
        f,
        "{},y",
        if data.dim() == 1 {
            "x".to_string()
        } else {
            header.join(",")
        }
    )?;
    for (x, y) in data.covariates().iter().zip(data.responses()) {
        let xs: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{},{y}", xs.join(","))?;
    }
    Ok(())
}

fn cmd_detect(
    input: Option<PathBuf>,
    covariates: Option<Vec<String>>,
    response: Option<String>,
    common: &CommonArgs,
) -> Result<(), Error> {
    let resolved = resolve(common)?;
    let input = input
        .or_else(|| resolved.file.input.clone())
        .ok_or_else(|| Error::invalid_input("detect needs --input (or input in the config file)"))?;
    let covariates = covariates
        .or_else(|| resolved.file.covariates.clone())
        .unwrap_or_else(|| vec!["x".to_string()]);
    let response = response
        .or_else(|| resolved.file.response.clone())
        .unwrap_or_else(|| "y".to_string());
    let data = load_csv(&input, &covariates, &response)?;
    run_detection(&data, &resolved.pipeline, "detect", &resolved.out_dir, None)?;
    Ok(())
}

fn cmd_sde(
    input: Option<PathBuf>,
    price_column: Option<String>,
    common: &CommonArgs,
) -> Result<(), Error> {
    let resolved = resolve(common)?;
    let input = input
        .or_else(|| resolved.file.input.clone())
        .ok_or_else(|| Error::invalid_input("sde needs --input (or input in the config file)"))?;
    let price_column = price_column
        .or_else(|| resolved.file.price_column.clone())
        .unwrap_or_else(|| "price".to_string());
    let (prices, dates) = load_price_csv(&input, &price_column)?;
    let data = sde_transform(&prices)?;

    // price-series defaults: a single window of 20 and a bootstrap range of
    // up to 300, unless configured explicitly
    let mut config = resolved.pipeline;
    if common.windows.is_none() && resolved.file.windows.is_none() {
        config.windows = vec![20];
    }
    if config.iboot.is_none() {
        let len = (5 * data.len() / 8).clamp(1, 300);
        config.iboot = Some(IndexRange::new(1, len)?);
    }
    run_detection(
        &data,
        &config,
        "sde",
        &resolved.out_dir,
        dates.as_deref(),
    )?;
    Ok(())
}

fn cmd_simulate(
    n: usize,
    tau: Option<usize>,
    phi: f64,
    noise_sd: f64,
    common: &CommonArgs,
) -> Result<(), Error> {
    let resolved = resolve(common)?;
    let config = resolved.pipeline;
    let spec = SyntheticSpec {
        n,
        tau,
        phase_pre: 0.0,
        phase_post: phi,
        noise_sd,
        seed: config.seed,
        domain: (0.0, std::f64::consts::PI),
    };
    let data = synth_generate(&spec)?;
    std::fs::create_dir_all(&resolved.out_dir)?;
    write_dataset_csv(&resolved.out_dir.join("dataset.csv"), &data)?;
    run_detection(&data, &config, "simulate", &resolved.out_dir, None)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_experiment(
    kind: ExperimentKind,
    runs: usize,
    phis: Option<Vec<f64>>,
    window_sets: Option<String>,
    n: usize,
    tau: usize,
    noise_sd: f64,
    common: &CommonArgs,
) -> Result<(), Error> {
    use std::f64::consts::PI;
    let resolved = resolve(common)?;
    let config = resolved.pipeline;

    let default_phis = match kind {
        ExperimentKind::Type1 => vec![],
        ExperimentKind::Multiscale => vec![PI / 10.0],
        _ => vec![PI / 2.0, PI / 5.0, PI / 10.0, PI / 20.0, PI / 40.0],
    };
    let default_sets: Vec<Vec<usize>> = match kind {
        ExperimentKind::Type1 => vec![config.windows.clone()],
        ExperimentKind::Multiscale => vec![
            vec![40],
            vec![40, 20],
            vec![40, 20, 10],
            vec![40, 20, 10, 5],
        ],
        _ => vec![vec![40], vec![20], vec![10]],
    };
    let window_sets = match window_sets {
        None => default_sets,
        Some(text) => text
            .split(';')
            .map(|set| {
                set.split(',')
                    .map(|w| {
                        w.trim().parse::<usize>().map_err(|_| {
                            Error::invalid_input(format!("bad window size '{w}'"))
                        })
                    })
                    .collect::<Result<Vec<usize>, Error>>()
            })
            .collect::<Result<Vec<Vec<usize>>, Error>>()?,
    };

    let spec = ExperimentSpec {
        runs,
        phis: phis.unwrap_or(default_phis),
        window_sets,
        base: SyntheticSpec {
            n,
            tau: Some(tau),
            phase_pre: 0.0,
            phase_post: 0.0,
            noise_sd,
            seed: 0,
            domain: (0.0, PI),
        },
        config: config.clone(),
        force_thresholds: None,
    };

    std::fs::create_dir_all(&resolved.out_dir)?;
    let (name, table) = with_thread_cap(config.threads, || -> Result<_, Error> {
        Ok(match kind {
            ExperimentKind::Type1 => ("type1", Table::Rates(type1_experiment(&spec)?)),
            ExperimentKind::Power => ("power", Table::Power(power_curve(&spec)?)),
            ExperimentKind::Rmse => ("rmse", Table::Rmse(localization_rmse(&spec)?)),
            ExperimentKind::Multiscale => {
                ("multiscale", Table::Multiscale(multiscale_table(&spec)?))
            }
        })
    })?;
    let csv_path = resolved.out_dir.join(format!("{name}.csv"));
    write_table(&csv_path, &spec, name, &table)?;
    write_manifest(&resolved.out_dir.join("manifest.txt"), &spec, name)?;
    println!("table written to {}", csv_path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Detect {
            input,
            covariates,
            response,
            common,
        } => cmd_detect(input.clone(), covariates.clone(), response.clone(), common),
        Command::Sde {
            input,
            price_column,
            common,
        } => cmd_sde(input.clone(), price_column.clone(), common),
        Command::Simulate {
            n,
            tau,
            phi,
            noise_sd,
            common,
        } => cmd_simulate(*n, *tau, *phi, *noise_sd, common),
        Command::Experiment {
            kind,
            runs,
            phis,
            window_sets,
            n,
            tau,
            noise_sd,
            common,
        } => cmd_experiment(
            *kind,
            *runs,
            phis.clone(),
            window_sets.clone(),
            *n,
            *tau,
            *noise_sd,
            common,
        ),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::InvalidInput(_) | Error::Csv(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
