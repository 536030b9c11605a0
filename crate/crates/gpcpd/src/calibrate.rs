// SPDX-License-Identifier: MIT OR Apache-2.0

//! Residual sign-flip bootstrap, bootstrap statistic fields, empirical
//! quantile functions, the data-driven multiplicity correction and the
//! resulting critical levels.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::GpFit;
use crate::rng::{self, rng_from};
use crate::scan::{stat_field, FactorCache, StatField, WindowGrid};

/// Resamples responses as `y*_i = fitted_i + s_i * residual_{j_i}` with `j_i`
/// uniform with replacement over the residual pool and `s_i` an independent
/// random sign. Replicate streams are derived from `(master seed, replicate
/// index)`, so any subset of replicates can be regenerated independently.
#[derive(Clone, Debug)]
pub struct BootstrapSampler {
    fitted: Vec<f64>,
    pool: Vec<f64>,
    master_seed: u64,
}

impl BootstrapSampler {
    pub fn from_fit(fit: &GpFit, master_seed: u64) -> Result<Self> {
        Self::new(fit.fitted.clone(), fit.residuals.clone(), master_seed)
    }

    pub fn new(fitted: Vec<f64>, pool: Vec<f64>, master_seed: u64) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::invalid_input("residual pool must be nonempty"));
        }
        if fitted.is_empty() {
            return Err(Error::invalid_input("fitted values must be nonempty"));
        }
        Ok(BootstrapSampler {
            fitted,
            pool,
            master_seed,
        })
    }

    pub fn seed(&self) -> u64 {
        self.master_seed
    }

    /// The bootstrap counterpart of the response vector for one replicate;
    /// deterministic given `(master seed, replicate index)`.
    pub fn replicate(&self, index: u64) -> Vec<f64> {
        let mut rng = rng_from(
            self.master_seed,
            rng::tags::BOOTSTRAP.wrapping_add(index.wrapping_mul(2)),
        );
        self.fitted
            .iter()
            .map(|&fit| {
                let j = rng.random_range(0..self.pool.len());
                let flip: bool = rng.random();
                let sign = if flip { 1.0 } else { -1.0 };
                fit + sign * self.pool[j]
            })
            .collect()
    }
}

/// Evaluates `count` bootstrap replicate fields against one shared cache.
pub fn bootstrap_fields(
    sampler: &BootstrapSampler,
    cache: &FactorCache,
    count: usize,
) -> Result<Vec<StatField>> {
    if count < 100 {
        return Err(Error::invalid_input(format!(
            "at least 100 bootstrap replicates are required; got {count}"
        )));
    }
    (0..count as u64)
        .into_par_iter()
        .map(|b| stat_field(&sampler.replicate(b), cache))
        .collect()
}

/// Smallest threshold whose strict exceedance probability over the samples is
/// at most `x`: with the samples sorted ascending as `a(1..B)`, this is
/// `a(ceil(B (1 - x)))` for `x` in `(0, 1)` and `a(B)` at `x = 0`. At `x = 1`
/// every threshold qualifies and the infimum is unbounded below.
pub fn empirical_quantile(samples: &[f64], x: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid_input("quantile of an empty sample set"));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::invalid_input(format!(
            "quantile level must lie in [0, 1]; got {x}"
        )));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let b = sorted.len();
    if x == 0.0 {
        return Ok(sorted[b - 1]);
    }
    let k = (b as f64 * (1.0 - x)).ceil() as usize;
    if k == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(sorted[k - 1])
}

/// How critical levels are indexed: one per cell `(n, t)`, or one per window
/// after maxing over the central points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationMode {
    PerCell,
    Simplified,
}

/// Critical levels produced by a calibration run.
#[derive(Clone, Debug, PartialEq)]
pub enum Thresholds {
    /// `levels[w][t - n]` aligned with the grid, per cell.
    PerCell(Vec<Vec<f64>>),
    /// One level per window, in grid order.
    PerWindow(Vec<f64>),
}

/// Corrected level, critical levels and bookkeeping for one calibration.
#[derive(Clone, Debug)]
pub struct CalibrationResult {
    pub alpha: f64,
    /// Multiplicity-corrected per-cell level; on the `1/B` grid.
    pub alpha_star: f64,
    pub replicates: usize,
    pub mode: CalibrationMode,
    pub grid: WindowGrid,
    pub thresholds: Thresholds,
    /// Master seed of the sampler that produced the replicates; recorded by
    /// the pipeline for reproducibility.
    pub seed: u64,
    pub warnings: Vec<String>,
}

impl CalibrationResult {
    /// Threshold for cell `(n, t)` under either mode.
    pub fn threshold(&self, n: usize, t: usize) -> Result<f64> {
        let w = self
            .grid
            .sizes()
            .iter()
            .position(|&m| m == n)
            .ok_or_else(|| Error::invalid_input(format!("window {n} not calibrated")))?;
        match &self.thresholds {
            Thresholds::PerWindow(levels) => Ok(levels[w]),
            Thresholds::PerCell(levels) => {
                if !self.grid.centers(n)?.contains(&t) {
                    return Err(Error::invalid_input(format!(
                        "center {t} outside the calibrated grid for window {n}"
                    )));
                }
                Ok(levels[w][t - n])
            }
        }
    }
}

fn validate_fields(fields: &[StatField]) -> Result<(&WindowGrid, usize)> {
    let b = fields.len();
    if b < 100 {
        return Err(Error::invalid_input(format!(
            "at least 100 replicate fields are required; got {b}"
        )));
    }
    let grid = fields[0].grid();
    if fields.iter().any(|f| f.grid() != grid) {
        return Err(Error::invalid_input(
            "replicate fields disagree on the window grid",
        ));
    }
    Ok((grid, b))
}

/// Finds the largest level `x` on the grid `{0, 1/B, ..., 1}` such that the
/// empirical probability of any coordinate's strict tail rank falling below
/// `x` stays within `alpha`, and returns it along with the per-coordinate
/// thresholds at that level.
///
/// Tail ranks use strict inequality, matching the strict exceedance event the
/// quantile function is built on; for tie-free samples the two formulations
/// coincide exactly.
fn minp_alpha_star(cells: &[Vec<f64>], alpha: f64) -> Result<(f64, Vec<f64>)> {
    let b = cells[0].len();
    let sorted: Vec<Vec<f64>> = cells
        .par_iter()
        .map(|col| {
            let mut s = col.clone();
            s.sort_unstable_by(f64::total_cmp);
            s
        })
        .collect();

    // m_b = min over coordinates of the strict-tail rank count
    let min_rank: Vec<usize> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut m = usize::MAX;
            for (col, s) in cells.iter().zip(&sorted) {
                let v = col[rep];
                // number of samples strictly greater than v
                let gt = b - s.partition_point(|&u| u <= v);
                m = m.min(gt);
            }
            m
        })
        .collect();

    // count[k] = #{replicates with m_b <= k - 1} = #{m_b < k/B}
    let mut hist = vec![0usize; b + 1];
    for &m in &min_rank {
        hist[m.min(b)] += 1;
    }
    let mut best_k = 0usize;
    let mut below = 0usize; // #{m_b < k/B}
    for k in 1..=b {
        below += hist[k - 1];
        if (below as f64) / (b as f64) <= alpha {
            best_k = k;
        }
    }
    let alpha_star = best_k as f64 / b as f64;
    if best_k == 0 {
        return Err(Error::DegenerateCalibration(format!(
            "corrected level collapsed to 0 at B = {b} over {} coordinates; \
             increase the replicate count or use the simplified mode",
            cells.len()
        )));
    }
    let thresholds = cells
        .iter()
        .map(|col| empirical_quantile(col, alpha_star))
        .collect::<Result<Vec<f64>>>()?;
    Ok((alpha_star, thresholds))
}

fn common_warnings(b: usize, alpha_star: f64, mode: CalibrationMode) -> Vec<String> {
    let mut warnings = Vec::new();
    if b < 500 {
        warnings.push(format!(
            "only {b} bootstrap replicates; critical levels may be unstable below 500"
        ));
    }
    if mode == CalibrationMode::PerCell && (b as f64) < 10.0 / alpha_star {
        warnings.push(format!(
            "per-cell quantiles at corrected level {alpha_star} need roughly B >= {:.0} \
             replicates (have {b}); consider the simplified mode",
            10.0 / alpha_star
        ));
    }
    warnings
}

fn validate_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid_input(format!(
            "significance level must lie in (0, 1); got {alpha}"
        )));
    }
    Ok(())
}

/// Per-cell calibration: corrects `alpha` for multiplicity across every cell
/// `(n, t)` and takes cell-wise empirical quantiles at the corrected level.
pub fn multiplicity_correct(fields: &[StatField], alpha: f64) -> Result<CalibrationResult> {
    validate_alpha(alpha)?;
    let (grid, b) = validate_fields(fields)?;

    let mut cells: Vec<Vec<f64>> = Vec::with_capacity(grid.cell_count());
    for &n in grid.sizes() {
        let count = grid.center_count(n)?;
        for i in 0..count {
            let mut col = Vec::with_capacity(b);
            for f in fields {
                col.push(f.window_row(n)?[i]);
            }
            cells.push(col);
        }
    }
    let (alpha_star, flat) = minp_alpha_star(&cells, alpha)?;

    let mut levels = Vec::new();
    let mut offset = 0;
    for &n in grid.sizes() {
        let count = grid.center_count(n)?;
        levels.push(flat[offset..offset + count].to_vec());
        offset += count;
    }
    Ok(CalibrationResult {
        alpha,
        alpha_star,
        replicates: b,
        mode: CalibrationMode::PerCell,
        grid: grid.clone(),
        thresholds: Thresholds::PerCell(levels),
        seed: 0,
        warnings: common_warnings(b, alpha_star, CalibrationMode::PerCell),
    })
}

/// Simplified calibration: one critical level per window, calibrated on the
/// per-replicate maxima `max_t A_n(t)` with the same multiplicity correction
/// across the window coordinates.
pub fn critical_levels_simplified(fields: &[StatField], alpha: f64) -> Result<CalibrationResult> {
    validate_alpha(alpha)?;
    let (grid, b) = validate_fields(fields)?;

    let maxima: Vec<Vec<f64>> = fields.iter().map(|f| f.window_maxima()).collect();
    let cells: Vec<Vec<f64>> = (0..grid.sizes().len())
        .map(|w| maxima.iter().map(|m| m[w]).collect())
        .collect();
    let (alpha_star, thresholds) = minp_alpha_star(&cells, alpha)?;
    Ok(CalibrationResult {
        alpha,
        alpha_star,
        replicates: b,
        mode: CalibrationMode::Simplified,
        grid: grid.clone(),
        thresholds: Thresholds::PerWindow(thresholds),
        seed: 0,
        warnings: common_warnings(b, alpha_star, CalibrationMode::Simplified),
    })
}
