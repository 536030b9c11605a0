// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rejection decision, change-point localization and the recursive
//! multiple-break procedure, plus the single-segment pipeline they share.

use serde::{Deserialize, Serialize};

use crate::calibrate::{
    bootstrap_fields, critical_levels_simplified, multiplicity_correct, BootstrapSampler,
    CalibrationMode, CalibrationResult,
};
use crate::config::{IndexRange, PipelineConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gp::{
    evidence_maximize, fit_predict_all, EvidenceBounds, EvidenceOptions, EvidenceReport,
};
use crate::kernel::{rho_schedule, KernelModel, SIGMA2_FLOOR};
use crate::rng::{derive_seed, tags};
use crate::scan::{build_cache, stat_field, StatField, WindowGrid};

/// Decision and localization bookkeeping for one tested segment. All indices
/// are 1-based within the tested segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub reject: bool,
    /// Cells `(n, t)` whose statistic exceeds its critical level, in grid
    /// order.
    pub exceedances: Vec<(usize, usize)>,
    /// Per window: the earliest exceedance center, if any.
    pub first_exceedance: Vec<(usize, Option<usize>)>,
    /// The earliest detecting window: argmin over n of (first exceedance
    /// plus n), ties to the smaller n.
    pub earliest_window: Option<usize>,
    /// First exceedance center of the earliest detecting window.
    pub tau_tilde: Option<usize>,
    /// Localized change point, filled in by [`localize`].
    pub change_point: Option<usize>,
    /// Set when the localization interval missed the widest window's center
    /// set and the first exceedance was returned instead.
    pub localization_fallback: bool,
}

/// Compares the statistic field against calibrated critical levels. In the
/// simplified mode the per-window level plays the role of every cell's
/// critical level, so exceedance centers are still attributed per cell.
pub fn run_test(field: &StatField, calibration: &CalibrationResult) -> Result<DetectionReport> {
    if field.grid() != &calibration.grid {
        return Err(Error::invalid_input(
            "statistic field and calibration disagree on the window grid",
        ));
    }
    let grid = field.grid();
    let mut exceedances = Vec::new();
    let mut first_exceedance = Vec::new();
    for &n in grid.sizes() {
        let row = field.window_row(n)?;
        let mut first = None;
        for (i, &value) in row.iter().enumerate() {
            let t = n + i;
            if value > calibration.threshold(n, t)? {
                exceedances.push((n, t));
                if first.is_none() {
                    first = Some(t);
                }
            }
        }
        first_exceedance.push((n, first));
    }
    let earliest_window = first_exceedance
        .iter()
        .filter_map(|&(n, first)| first.map(|t| (t + n, n)))
        .min() // lexicographic: earliest (t + n), ties to smaller n
        .map(|(_, n)| n);
    let tau_tilde = earliest_window.and_then(|n_star| {
        first_exceedance
            .iter()
            .find(|&&(n, _)| n == n_star)
            .and_then(|&(_, first)| first)
    });
    Ok(DetectionReport {
        reject: !exceedances.is_empty(),
        exceedances,
        first_exceedance,
        earliest_window,
        tau_tilde,
        change_point: None,
        localization_fallback: false,
    })
}

/// Localization outcome.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Localization {
    pub change_point: usize,
    /// True when the search interval did not intersect the widest window's
    /// center set and the first exceedance center was returned instead.
    pub fallback: bool,
}

/// Change-point estimator: the argmax of the widest window's statistic row
/// over `[tau_tilde - n*, tau_tilde + n*)`, intersected with that window's
/// center set; ties break to the smallest center.
pub fn localize(report: &DetectionReport, field: &StatField) -> Result<Localization> {
    let (Some(n_star), Some(tau_tilde)) = (report.earliest_window, report.tau_tilde) else {
        return Err(Error::invalid_input(
            "localization needs a rejecting report",
        ));
    };
    let grid = field.grid();
    let n_plus = grid.n_plus();
    let centers = grid.centers(n_plus)?;
    let lo = tau_tilde.saturating_sub(n_star).max(*centers.start());
    let hi = (tau_tilde + n_star - 1).min(*centers.end());
    if lo > hi {
        return Ok(Localization {
            change_point: tau_tilde,
            fallback: true,
        });
    }
    let row = field.window_row(n_plus)?;
    let mut best_t = lo;
    let mut best_v = f64::NEG_INFINITY;
    for t in lo..=hi {
        let v = row[t - n_plus];
        if v > best_v {
            best_v = v;
            best_t = t;
        }
    }
    Ok(Localization {
        change_point: best_t,
        fallback: false,
    })
}

/// Everything produced while testing one segment.
#[derive(Clone, Debug)]
pub struct SegmentOutcome {
    /// 1-based global start of the segment in the original dataset.
    pub start: usize,
    /// 1-based global end (inclusive).
    pub end: usize,
    pub windows: Vec<usize>,
    /// Bootstrap index range, local to the segment.
    pub iboot: IndexRange,
    pub model: KernelModel,
    pub evidence: Option<EvidenceReport>,
    pub field: StatField,
    pub calibration: CalibrationResult,
    pub report: DetectionReport,
}

/// One detected break, in the original dataset's 1-based indexing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BreakRecord {
    pub change_point: usize,
    pub n_star: usize,
    pub tau_tilde: usize,
    pub segment_start: usize,
    pub localization_fallback: bool,
}

/// Result of the recursive multiple-break procedure.
#[derive(Clone, Debug)]
pub struct MultiBreakReport {
    pub breaks: Vec<BreakRecord>,
    pub segments: Vec<SegmentOutcome>,
    /// Non-fatal notes: dropped windows, terminated recursion and the like.
    pub diagnostics: Vec<String>,
}

/// Chooses hyperparameters for a segment: the configured fixed kernel, or
/// evidence maximization on the bootstrap range. Under a schedule rho mode
/// the multiplier is fixed by the schedule at the bootstrap sample size and
/// the amplitude stays at 1.
pub fn fit_hyperparameters(
    data: &Dataset,
    iboot: IndexRange,
    config: &PipelineConfig,
    seed: u64,
) -> Result<(KernelModel, Option<EvidenceReport>)> {
    if let Some(kernel) = &config.kernel {
        kernel.validate()?;
        return Ok((*kernel, None));
    }
    let lo = iboot.start - 1;
    let hi = iboot.end;
    let xs = &data.covariates()[lo..hi];
    let ys = &data.responses()[lo..hi];

    let (rho, optimize_amplitude) = match config.rho.smoothness()? {
        None => (1.0, true),
        Some(spec) => (rho_schedule(&spec, iboot.len() as f64)?, false),
    };

    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / ys.len() as f64;
    let bounds = EvidenceBounds::from_covariates(xs);
    let mid_t2 = (0.5 * (bounds.log_theta2.0 + bounds.log_theta2.1)).exp();
    let init = KernelModel {
        family: crate::kernel::KernelFamily::Rbf,
        theta1: if optimize_amplitude {
            var.sqrt().max(1e-2)
        } else {
            1.0
        },
        theta2: mid_t2,
        sigma2: (0.25 * var).max(SIGMA2_FLOOR),
        rho,
    };
    let opts = EvidenceOptions {
        starts: config.evidence_starts,
        max_iterations: config.evidence_max_iterations,
        gradient_tol: 1e-5,
        seed,
        optimize_amplitude,
    };
    let report = evidence_maximize(xs, ys, &init, &bounds, &opts)?;
    Ok((report.model, Some(report)))
}

fn calibrate_segment(
    fields: &[StatField],
    alpha: f64,
    mode: CalibrationMode,
    seed: u64,
) -> Result<CalibrationResult> {
    let mut calibration = match mode {
        CalibrationMode::PerCell => multiplicity_correct(fields, alpha)?,
        CalibrationMode::Simplified => critical_levels_simplified(fields, alpha)?,
    };
    calibration.seed = seed;
    Ok(calibration)
}

/// Runs the single-break pipeline on one segment of the data with an already
/// chosen kernel model. `start` is the segment's 1-based global offset, used
/// only for bookkeeping in the returned outcome.
pub fn run_segment(
    segment: &Dataset,
    start: usize,
    windows: &[usize],
    iboot: IndexRange,
    model: KernelModel,
    evidence: Option<EvidenceReport>,
    config: &PipelineConfig,
    bootstrap_seed: u64,
) -> Result<SegmentOutcome> {
    let grid = WindowGrid::new(segment.len(), windows)?;
    let fit = fit_predict_all(segment, iboot.as_inclusive(), &model)?;
    let cache = build_cache(segment, &model, &grid)?;
    let field = stat_field(segment.responses(), &cache)?;
    let sampler = BootstrapSampler::from_fit(&fit, bootstrap_seed)?;
    let replicas = bootstrap_fields(&sampler, &cache, config.replicates)?;
    let calibration = calibrate_segment(&replicas, config.alpha, config.mode, bootstrap_seed)?;
    let mut report = run_test(&field, &calibration)?;
    if report.reject {
        let loc = localize(&report, &field)?;
        report.change_point = Some(loc.change_point);
        report.localization_fallback = loc.fallback;
    }
    Ok(SegmentOutcome {
        start,
        end: start + segment.len() - 1,
        windows: grid.sizes().to_vec(),
        iboot,
        model,
        evidence,
        field,
        calibration,
        report,
    })
}

/// Single-break pipeline over the whole dataset: hyperparameter fit on the
/// bootstrap range, cache construction, calibration, test and localization.
pub fn run_single(data: &Dataset, config: &PipelineConfig) -> Result<SegmentOutcome> {
    config.validate(data.len())?;
    let iboot = config.effective_iboot(data.len())?;
    let (model, evidence) =
        fit_hyperparameters(data, iboot, config, derive_seed(config.seed, tags::EVIDENCE))?;
    run_segment(
        data,
        1,
        &config.windows,
        iboot,
        model,
        evidence,
        config,
        derive_seed(config.seed, tags::SEGMENT),
    )
}

/// Recursive multiple-break detection: runs the single-break pipeline, and on
/// rejection records the localized break and restarts on the data from
/// `tau_tilde + n*` onward. Recursion stops when nothing rejects, the
/// remaining segment drops below `2 n_min + min_iboot`, or a later segment
/// fails (partial results are returned with a diagnostic). Iterative by
/// construction, so segment count is bounded by `N / (2 n_min)` without deep
/// call stacks.
pub fn detect_multiple(data: &Dataset, config: &PipelineConfig) -> Result<MultiBreakReport> {
    config.validate(data.len())?;
    let n = data.len();
    let n_minus = *config.windows.iter().min().expect("validated nonempty");
    let first_iboot = config.effective_iboot(n)?;

    let mut breaks = Vec::new();
    let mut segments = Vec::new();
    let mut diagnostics = Vec::new();
    let mut start = 1usize;
    let mut reusable: Option<(KernelModel, Option<EvidenceReport>)> = None;

    for segment_index in 0.. {
        let len = n - start + 1;
        if len < 2 * n_minus + config.min_iboot {
            diagnostics.push(format!(
                "segment {segment_index} from {start}: length {len} below \
                 2*{n_minus} + {}; recursion stopped",
                config.min_iboot
            ));
            break;
        }
        let windows: Vec<usize> = config
            .windows
            .iter()
            .copied()
            .filter(|&w| 2 * w <= len)
            .collect();
        if windows.len() < config.windows.len() {
            let dropped: Vec<String> = config
                .windows
                .iter()
                .filter(|&&w| 2 * w > len)
                .map(|w| w.to_string())
                .collect();
            diagnostics.push(format!(
                "segment {segment_index} from {start}: window size(s) {} too wide \
                 for length {len}; dropped",
                dropped.join(", ")
            ));
        }

        let iboot = if segment_index == 0 {
            first_iboot
        } else {
            let cap = (len / 3).max(1);
            let seg_len = first_iboot.len().min(cap);
            if seg_len < config.min_iboot {
                diagnostics.push(format!(
                    "segment {segment_index} from {start}: bootstrap range would be \
                     {seg_len} < {}; recursion stopped",
                    config.min_iboot
                ));
                break;
            }
            IndexRange::new(1, seg_len)?
        };

        let segment = data.segment(start, n)?;
        let seg_seed = derive_seed(config.seed, tags::SEGMENT.wrapping_add(segment_index));
        let fitted = match &reusable {
            Some(pair) if !config.refit_segments => Ok(pair.clone()),
            _ => fit_hyperparameters(
                &segment,
                iboot,
                config,
                derive_seed(config.seed, tags::EVIDENCE.wrapping_add(segment_index)),
            ),
        };
        let outcome = fitted.and_then(|(model, evidence)| {
            run_segment(
                &segment, start, &windows, iboot, model, evidence, config, seg_seed,
            )
        });
        let outcome = match outcome {
            Ok(o) => o,
            Err(e) if segment_index > 0 => {
                diagnostics.push(format!(
                    "segment {segment_index} from {start} failed: {e}; returning \
                     partial results"
                ));
                break;
            }
            Err(e) => return Err(e),
        };
        if reusable.is_none() {
            reusable = Some((outcome.model, outcome.evidence));
        }

        if !outcome.report.reject {
            segments.push(outcome);
            break;
        }
        let n_star = outcome.report.earliest_window.expect("rejecting report");
        let tau_tilde = outcome.report.tau_tilde.expect("rejecting report");
        let change_point = outcome.report.change_point.expect("localized on reject");
        breaks.push(BreakRecord {
            change_point: start - 1 + change_point,
            n_star,
            tau_tilde: start - 1 + tau_tilde,
            segment_start: start,
            localization_fallback: outcome.report.localization_fallback,
        });
        let next = start - 1 + tau_tilde + n_star;
        segments.push(outcome);
        start = next;
    }

    Ok(MultiBreakReport {
        breaks,
        segments,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::Thresholds;
    use crate::scan::WindowGrid;

    fn grid_10_2() -> WindowGrid {
        WindowGrid::new(10, &[2]).unwrap()
    }

    fn simplified(grid: &WindowGrid, levels: Vec<f64>, alpha: f64) -> CalibrationResult {
        CalibrationResult {
            alpha,
            alpha_star: alpha,
            replicates: 1000,
            mode: CalibrationMode::Simplified,
            grid: grid.clone(),
            thresholds: Thresholds::PerWindow(levels),
            seed: 0,
            warnings: vec![],
        }
    }

    #[test]
    fn no_exceedance_means_accept() {
        let grid = grid_10_2();
        let field = StatField::from_rows(grid.clone(), vec![vec![0.5; 7]]).unwrap();
        let cal = simplified(&grid, vec![1.0], 0.05);
        let report = run_test(&field, &cal).unwrap();
        assert!(!report.reject);
        assert!(report.exceedances.is_empty());
        assert_eq!(report.earliest_window, None);
        assert!(localize(&report, &field).is_err());
    }

    #[test]
    fn single_exceedance_sets_first_center() {
        let grid = grid_10_2();
        let mut row = vec![0.1; 7];
        row[3] = 2.0; // t = 5
        let field = StatField::from_rows(grid.clone(), vec![row]).unwrap();
        let cal = simplified(&grid, vec![1.0], 0.05);
        let report = run_test(&field, &cal).unwrap();
        assert!(report.reject);
        assert_eq!(report.exceedances, vec![(2, 5)]);
        assert_eq!(report.first_exceedance, vec![(2, Some(5))]);
        assert_eq!(report.earliest_window, Some(2));
        assert_eq!(report.tau_tilde, Some(5));
    }

    #[test]
    fn earliest_window_ties_break_to_smaller_n() {
        let grid = WindowGrid::new(20, &[4, 2]).unwrap();
        // first exceedance at t=6 for n=4 (t+n = 10) and t=8 for n=2 (t+n = 10)
        let mut rows = vec![vec![0.0; 13], vec![0.0; 17]];
        rows[0][2] = 5.0; // n=4, t=6
        rows[1][6] = 5.0; // n=2, t=8
        let field = StatField::from_rows(grid.clone(), rows).unwrap();
        let cal = simplified(&grid, vec![1.0, 1.0], 0.05);
        let report = run_test(&field, &cal).unwrap();
        assert_eq!(report.earliest_window, Some(2));
        assert_eq!(report.tau_tilde, Some(8));
    }

    #[test]
    fn localize_picks_peak_and_breaks_ties_left() {
        let grid = grid_10_2();
        let mut row = vec![0.0; 7];
        row[2] = 3.0; // t=4 exceeds
        let field = StatField::from_rows(grid.clone(), vec![row.clone()]).unwrap();
        let cal = simplified(&grid, vec![2.5], 0.05);
        let report = run_test(&field, &cal).unwrap();
        let loc = localize(&report, &field).unwrap();
        assert_eq!(loc.change_point, 4);
        assert!(!loc.fallback);

        // plateau: equal maxima at t=3 and t=4 inside the interval
        let mut row2 = vec![0.0; 7];
        row2[1] = 3.0;
        row2[2] = 3.0;
        let field2 = StatField::from_rows(grid.clone(), vec![row2]).unwrap();
        let report2 = run_test(&field2, &cal).unwrap();
        let loc2 = localize(&report2, &field2).unwrap();
        assert_eq!(loc2.change_point, 3);
    }

    #[test]
    fn localize_falls_back_outside_center_set() {
        // windows 4 and 2: exceedance only for n=2 at t=2, interval
        // [0, 4) intersected with centers of n=4 ([4, 16]) is empty
        let grid = WindowGrid::new(20, &[4, 2]).unwrap();
        let mut rows = vec![vec![0.0; 13], vec![0.0; 17]];
        rows[1][0] = 5.0; // n=2, t=2
        let field = StatField::from_rows(grid.clone(), rows).unwrap();
        let cal = simplified(&grid, vec![10.0, 1.0], 0.05);
        let report = run_test(&field, &cal).unwrap();
        assert_eq!(report.earliest_window, Some(2));
        let loc = localize(&report, &field).unwrap();
        assert!(loc.fallback);
        assert_eq!(loc.change_point, 2);
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let field = StatField::from_rows(grid_10_2(), vec![vec![0.0; 7]]).unwrap();
        let other = WindowGrid::new(12, &[2]).unwrap();
        let cal = simplified(&other, vec![1.0], 0.05);
        assert!(run_test(&field, &cal).is_err());
    }

    #[test]
    fn lowering_thresholds_never_unrejects() {
        let grid = grid_10_2();
        let row: Vec<f64> = (0..7).map(|i| (i as f64 * 0.9).sin()).collect();
        let field = StatField::from_rows(grid.clone(), vec![row]).unwrap();
        let mut rejected = false;
        for th in [2.0, 1.0, 0.5, 0.0, -1.0] {
            let cal = simplified(&grid, vec![th], 0.05);
            let report = run_test(&field, &cal).unwrap();
            if rejected {
                assert!(report.reject, "reject flipped back at threshold {th}");
            }
            rejected = report.reject;
        }
        assert!(rejected);
    }
}
