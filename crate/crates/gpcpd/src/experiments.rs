// SPDX-License-Identifier: MIT OR Apache-2.0

//! Monte Carlo harness: type-I error rates, power curves, localization error
//! and the multiscale window comparison, all deterministic given a seed.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{CalibrationMode, CalibrationResult, Thresholds};
use crate::config::PipelineConfig;
use crate::dataset::{break_extent, synth_generate, Dataset, SyntheticSpec};
use crate::detect::{fit_hyperparameters, localize, run_single, run_test, DetectionReport};
use crate::error::{Error, Result};
use crate::gp::fit_predict_all;
use crate::kernel::KernelModel;
use crate::rng::{derive_seed, tags};
use crate::scan::{build_cache, stat_field, WindowGrid};

/// Monte Carlo experiment description. The pipeline settings (level,
/// replicate count, bootstrap range, master seed) live in `config`; the
/// synthetic world (size, break location, noise, domain) in `base`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentSpec {
    /// Repetitions per configuration.
    pub runs: usize,
    /// Phase shifts to sweep for the alternative.
    pub phis: Vec<f64>,
    /// Window-size sets to sweep.
    pub window_sets: Vec<Vec<usize>>,
    /// Synthetic world; its `seed` is overridden per repetition and its
    /// phases per `phi`.
    pub base: SyntheticSpec,
    pub config: PipelineConfig,
    /// Debug hook: replaces every critical level with a constant, skipping
    /// the bootstrap entirely.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub force_thresholds: Option<f64>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::invalid_input("at least one repetition is required"));
        }
        if self.window_sets.is_empty() {
            return Err(Error::invalid_input("at least one window set is required"));
        }
        for phi in &self.phis {
            if !(*phi > -std::f64::consts::PI && *phi <= std::f64::consts::PI) {
                return Err(Error::invalid_input(format!(
                    "phase shift {phi} outside (-pi, pi]"
                )));
            }
        }
        self.base.validate()?;
        Ok(())
    }

    /// Stable hash of the whole specification, for output manifests.
    pub fn config_hash(&self) -> u64 {
        let text = toml::to_string(self).unwrap_or_default();
        fnv1a(text.as_bytes())
    }
}

/// FNV-1a over bytes; stable across platforms and builds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// One repetition's distilled outcome.
#[derive(Clone, Copy, Debug)]
struct RepOutcome {
    reject: bool,
    n_star: Option<usize>,
    change_point: Option<usize>,
    break_extent: f64,
}

fn synthetic_for(spec: &ExperimentSpec, phi: f64, rep: usize) -> SyntheticSpec {
    let data_seed = derive_seed(spec.config.seed, tags::EXPERIMENT_DATA.wrapping_add(rep as u64));
    SyntheticSpec {
        tau: if phi == 0.0 { None } else { spec.base.tau },
        phase_pre: 0.0,
        phase_post: phi,
        seed: data_seed,
        ..spec.base
    }
}

fn observed_extent(data: &Dataset, spec: &SyntheticSpec, n: usize) -> f64 {
    let Some(tau) = spec.tau else { return 0.0 };
    if tau + n - 1 > data.len() {
        return 0.0;
    }
    let phi = spec.phase_post;
    break_extent(
        |x| (x[0] + spec.phase_pre).sin(),
        |x| (x[0] + phi).sin(),
        data.covariates(),
        tau,
        n,
    )
    .unwrap_or(0.0)
}

fn forced_calibration(grid: &WindowGrid, alpha: f64, level: f64) -> CalibrationResult {
    CalibrationResult {
        alpha,
        alpha_star: alpha,
        replicates: 0,
        mode: CalibrationMode::Simplified,
        grid: grid.clone(),
        thresholds: Thresholds::PerWindow(vec![level; grid.sizes().len()]),
        seed: 0,
        warnings: vec![],
    }
}

fn run_repetition(spec: &ExperimentSpec, windows: &[usize], phi: f64, rep: usize) -> Result<RepOutcome> {
    let synth = synthetic_for(spec, phi, rep);
    let data = synth_generate(&synth)?;
    let min_window = *windows.iter().min().expect("nonempty window set");
    let extent = observed_extent(&data, &synth, min_window);

    let pipe_seed = derive_seed(spec.config.seed, tags::EXPERIMENT_PIPE.wrapping_add(rep as u64));
    let config = PipelineConfig {
        windows: windows.to_vec(),
        seed: pipe_seed,
        ..spec.config.clone()
    };

    let report: DetectionReport = if let Some(level) = spec.force_thresholds {
        // bypass the bootstrap: fixed thresholds on the real field
        config.validate(data.len())?;
        let iboot = config.effective_iboot(data.len())?;
        let (model, _) = fit_hyperparameters(
            &data,
            iboot,
            &config,
            derive_seed(config.seed, tags::EVIDENCE),
        )?;
        let grid = WindowGrid::new(data.len(), windows)?;
        let _ = fit_predict_all(&data, iboot.as_inclusive(), &model)?;
        let cache = build_cache(&data, &model, &grid)?;
        let field = stat_field(data.responses(), &cache)?;
        let cal = forced_calibration(&grid, config.alpha, level);
        let mut report = run_test(&field, &cal)?;
        if report.reject {
            let loc = localize(&report, &field)?;
            report.change_point = Some(loc.change_point);
        }
        report
    } else {
        run_single(&data, &config)?.report
    };

    Ok(RepOutcome {
        reject: report.reject,
        n_star: report.earliest_window,
        change_point: report.change_point,
        break_extent: extent,
    })
}

fn run_batch(spec: &ExperimentSpec, windows: &[usize], phi: f64) -> Result<Vec<RepOutcome>> {
    (0..spec.runs)
        .into_par_iter()
        .map(|rep| run_repetition(spec, windows, phi, rep))
        .collect()
}

fn binomial_se(rate: f64, runs: usize) -> f64 {
    (rate * (1.0 - rate) / runs as f64).sqrt()
}

fn windows_label(windows: &[usize]) -> String {
    let mut sorted = windows.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    sorted
        .iter()
        .map(|w| w.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Rejection-rate table row.
#[derive(Clone, Debug, Serialize)]
pub struct RateRow {
    pub windows: String,
    pub phi: f64,
    pub rejections: usize,
    pub runs: usize,
    pub rate: f64,
    pub se: f64,
}

/// Rejection rate under the no-break hypothesis, per window set.
pub fn type1_experiment(spec: &ExperimentSpec) -> Result<Vec<RateRow>> {
    spec.validate()?;
    let mut rows = Vec::new();
    for windows in &spec.window_sets {
        let outcomes = run_batch(spec, windows, 0.0)?;
        let rejections = outcomes.iter().filter(|o| o.reject).count();
        let rate = rejections as f64 / spec.runs as f64;
        rows.push(RateRow {
            windows: windows_label(windows),
            phi: 0.0,
            rejections,
            runs: spec.runs,
            rate,
            se: binomial_se(rate, spec.runs),
        });
    }
    Ok(rows)
}

/// Power-curve row: rejection rate under the alternative, with the mean
/// observed break extent at the smallest window of the set.
#[derive(Clone, Debug, Serialize)]
pub struct PowerRow {
    pub windows: String,
    pub phi: f64,
    pub break_extent: f64,
    pub rejections: usize,
    pub runs: usize,
    pub power: f64,
    pub se: f64,
}

pub fn power_curve(spec: &ExperimentSpec) -> Result<Vec<PowerRow>> {
    spec.validate()?;
    let mut rows = Vec::new();
    for windows in &spec.window_sets {
        for &phi in &spec.phis {
            let outcomes = run_batch(spec, windows, phi)?;
            let rejections = outcomes.iter().filter(|o| o.reject).count();
            let power = rejections as f64 / spec.runs as f64;
            let extent =
                outcomes.iter().map(|o| o.break_extent).sum::<f64>() / spec.runs as f64;
            rows.push(PowerRow {
                windows: windows_label(windows),
                phi,
                break_extent: extent,
                rejections,
                runs: spec.runs,
                power,
                se: binomial_se(power, spec.runs),
            });
        }
    }
    Ok(rows)
}

/// Localization-error row; the error is measured against the true break
/// index over rejecting runs only, with the rejection count reported.
#[derive(Clone, Debug, Serialize)]
pub struct RmseRow {
    pub windows: String,
    pub phi: f64,
    pub break_extent: f64,
    pub rejections: usize,
    pub runs: usize,
    pub rmse: f64,
}

pub fn localization_rmse(spec: &ExperimentSpec) -> Result<Vec<RmseRow>> {
    spec.validate()?;
    let tau = spec
        .base
        .tau
        .ok_or_else(|| Error::invalid_input("localization experiments need a break index"))?;
    let mut rows = Vec::new();
    for windows in &spec.window_sets {
        for &phi in &spec.phis {
            let outcomes = run_batch(spec, windows, phi)?;
            let errors: Vec<f64> = outcomes
                .iter()
                .filter(|o| o.reject)
                .filter_map(|o| o.change_point)
                .map(|cp| cp as f64 - tau as f64)
                .collect();
            let rejections = outcomes.iter().filter(|o| o.reject).count();
            let rmse = if errors.is_empty() {
                f64::NAN
            } else {
                (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt()
            };
            let extent =
                outcomes.iter().map(|o| o.break_extent).sum::<f64>() / spec.runs as f64;
            rows.push(RmseRow {
                windows: windows_label(windows),
                phi,
                break_extent: extent,
                rejections,
                runs: spec.runs,
                rmse,
            });
        }
    }
    Ok(rows)
}

/// Multiscale comparison row: power and the mean earliest-detecting-window
/// width over rejecting runs, at the first configured phase shift.
#[derive(Clone, Debug, Serialize)]
pub struct MultiscaleRow {
    pub windows: String,
    pub phi: f64,
    pub power: f64,
    pub se: f64,
    pub mean_n_star: f64,
    pub rejections: usize,
    pub runs: usize,
}

pub fn multiscale_table(spec: &ExperimentSpec) -> Result<Vec<MultiscaleRow>> {
    spec.validate()?;
    let phi = *spec
        .phis
        .first()
        .ok_or_else(|| Error::invalid_input("multiscale table needs a phase shift"))?;
    let mut rows = Vec::new();
    for windows in &spec.window_sets {
        let outcomes = run_batch(spec, windows, phi)?;
        let rejections = outcomes.iter().filter(|o| o.reject).count();
        let power = rejections as f64 / spec.runs as f64;
        let widths: Vec<f64> = outcomes
            .iter()
            .filter(|o| o.reject)
            .filter_map(|o| o.n_star)
            .map(|n| n as f64)
            .collect();
        let mean_n_star = if widths.is_empty() {
            f64::NAN
        } else {
            widths.iter().sum::<f64>() / widths.len() as f64
        };
        rows.push(MultiscaleRow {
            windows: windows_label(windows),
            phi,
            power,
            se: binomial_se(power, spec.runs),
            mean_n_star,
            rejections,
            runs: spec.runs,
        });
    }
    Ok(rows)
}

/// Hyperparameters fitted once for reuse across Monte Carlo draws that share
/// a design; used where refitting per draw would dominate the runtime while
/// adding nothing to what is being measured.
pub fn pilot_model(spec: &ExperimentSpec) -> Result<KernelModel> {
    let synth = synthetic_for(spec, 0.0, 0);
    let data = synth_generate(&synth)?;
    let iboot = spec.config.effective_iboot(data.len())?;
    let (model, _) = fit_hyperparameters(
        &data,
        iboot,
        &spec.config,
        derive_seed(spec.config.seed, tags::EVIDENCE),
    )?;
    Ok(model)
}

fn meta_lines(spec: &ExperimentSpec, kind: &str) -> String {
    format!(
        "# gpcpd experiment: {kind}\n# config_hash: {:016x}\n# seed: {}\n# runs: {}\n",
        spec.config_hash(),
        spec.config.seed,
        spec.runs
    )
}

fn write_csv_rows<W: Write>(mut w: W, header: &str, rows: &[Vec<String>]) -> Result<()> {
    writeln!(w, "{header}")?;
    for row in rows {
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Writes one experiment table with its metadata preamble.
pub fn write_table(path: &Path, spec: &ExperimentSpec, kind: &str, table: &Table) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(meta_lines(spec, kind).as_bytes())?;
    match table {
        Table::Rates(rows) => write_csv_rows(
            &mut file,
            "windows,phi,rejections,runs,rate,se",
            &rows
                .iter()
                .map(|r| {
                    vec![
                        format!("\"{}\"", r.windows),
                        r.phi.to_string(),
                        r.rejections.to_string(),
                        r.runs.to_string(),
                        r.rate.to_string(),
                        r.se.to_string(),
                    ]
                })
                .collect::<Vec<_>>(),
        ),
        Table::Power(rows) => write_csv_rows(
            &mut file,
            "windows,phi,break_extent,rejections,runs,power,se",
            &rows
                .iter()
                .map(|r| {
                    vec![
                        format!("\"{}\"", r.windows),
                        r.phi.to_string(),
                        r.break_extent.to_string(),
                        r.rejections.to_string(),
                        r.runs.to_string(),
                        r.power.to_string(),
                        r.se.to_string(),
                    ]
                })
                .collect::<Vec<_>>(),
        ),
        Table::Rmse(rows) => write_csv_rows(
            &mut file,
            "windows,phi,break_extent,rejections,runs,rmse",
            &rows
                .iter()
                .map(|r| {
                    vec![
                        format!("\"{}\"", r.windows),
                        r.phi.to_string(),
                        r.break_extent.to_string(),
                        r.rejections.to_string(),
                        r.runs.to_string(),
                        r.rmse.to_string(),
                    ]
                })
                .collect::<Vec<_>>(),
        ),
        Table::Multiscale(rows) => write_csv_rows(
            &mut file,
            "windows,phi,power,se,mean_n_star,rejections,runs",
            &rows
                .iter()
                .map(|r| {
                    vec![
                        format!("\"{}\"", r.windows),
                        r.phi.to_string(),
                        r.power.to_string(),
                        r.se.to_string(),
                        r.mean_n_star.to_string(),
                        r.rejections.to_string(),
                        r.runs.to_string(),
                    ]
                })
                .collect::<Vec<_>>(),
        ),
    }
}

/// A finished experiment table.
pub enum Table {
    Rates(Vec<RateRow>),
    Power(Vec<PowerRow>),
    Rmse(Vec<RmseRow>),
    Multiscale(Vec<MultiscaleRow>),
}

/// Writes the run manifest: the full specification plus the derived
/// per-repetition seed scheme.
pub fn write_manifest(path: &Path, spec: &ExperimentSpec, kind: &str) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "# gpcpd experiment manifest")?;
    writeln!(file, "kind: {kind}")?;
    writeln!(file, "config_hash: {:016x}", spec.config_hash())?;
    writeln!(file, "master_seed: {}", spec.config.seed)?;
    writeln!(file, "runs: {}", spec.runs)?;
    writeln!(
        file,
        "seed_scheme: data = derive(master, {:#x} + rep), pipeline = derive(master, {:#x} + rep)",
        tags::EXPERIMENT_DATA,
        tags::EXPERIMENT_PIPE
    )?;
    writeln!(file)?;
    let body = toml::to_string_pretty(spec)
        .map_err(|e| Error::invalid_input(format!("manifest serialization: {e}")))?;
    file.write_all(body.as_bytes())?;
    Ok(())
}
