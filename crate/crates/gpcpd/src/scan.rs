// SPDX-License-Identifier: MIT OR Apache-2.0

//! Window bookkeeping, Gram-factor precomputation and evaluation of the
//! test-statistic field for arbitrary response vectors.
//!
//! The covariate design is fixed, so the per-window factorizations are
//! response-independent and shared across all bootstrap replicates; the cache
//! is built once and reused.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gp::PdFactor;
use crate::kernel::{gram_matrix, KernelModel};

/// Window sizes and their admissible central points. For a window size `n`
/// the central points are `t = n, n+1, ..., N-n` (1-based): `n` observations
/// to the left of and including `t`, `n` to the right.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowGrid {
    total: usize,
    /// Window sizes, canonically sorted in decreasing order.
    sizes: Vec<usize>,
}

impl WindowGrid {
    pub fn new(total: usize, sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::invalid_input("window size set must be nonempty"));
        }
        let mut sizes = sizes.to_vec();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        sizes.dedup();
        if sizes.contains(&0) {
            return Err(Error::invalid_input("window sizes must be positive"));
        }
        for &n in &sizes {
            if 2 * n > total {
                return Err(Error::invalid_input(format!(
                    "window size {n} needs 2n <= N; dataset has N = {total}"
                )));
            }
        }
        Ok(WindowGrid { total, sizes })
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    /// Window sizes in decreasing order.
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_minus(&self) -> usize {
        *self.sizes.last().expect("nonempty by construction")
    }

    pub fn n_plus(&self) -> usize {
        self.sizes[0]
    }

    /// Central points for window size `n`.
    pub fn centers(&self, n: usize) -> Result<std::ops::RangeInclusive<usize>> {
        if !self.sizes.contains(&n) {
            return Err(Error::invalid_input(format!(
                "window size {n} is not part of the grid"
            )));
        }
        Ok(n..=self.total - n)
    }

    pub fn center_count(&self, n: usize) -> Result<usize> {
        if !self.sizes.contains(&n) {
            return Err(Error::invalid_input(format!(
                "window size {n} is not part of the grid"
            )));
        }
        Ok(self.total - 2 * n + 1)
    }

    /// Number of cells `(n, t)` in the grid.
    pub fn cell_count(&self) -> usize {
        self.sizes.iter().map(|n| self.total - 2 * n + 1).sum()
    }
}

struct CellFactors {
    left: PdFactor,
    right: PdFactor,
    joint: PdFactor,
}

/// Per-cell positive-definite factorizations of the left/right/joint Gram
/// matrices, immutable after construction and shared read-only.
pub struct FactorCache {
    grid: WindowGrid,
    model: KernelModel,
    /// `cells[w][t - n]` for window `sizes[w]` and center `t`.
    cells: Vec<Vec<CellFactors>>,
}

/// Builds the complete factor cache for the grid. Cost is one factorization
/// sweep, `O(sum_n |T_n| n^3)`; construction parallelizes over cells.
pub fn build_cache(
    dataset: &Dataset,
    model: &KernelModel,
    grid: &WindowGrid,
) -> Result<FactorCache> {
    if grid.total_len() != dataset.len() {
        return Err(Error::invalid_input(format!(
            "grid is for N = {}, dataset has N = {}",
            grid.total_len(),
            dataset.len()
        )));
    }
    model.validate()?;
    let covs = dataset.covariates();
    let cells: Result<Vec<Vec<CellFactors>>> = grid
        .sizes()
        .iter()
        .map(|&n| {
            let centers: Vec<usize> = grid.centers(n)?.collect();
            centers
                .par_iter()
                .map(|&t| {
                    // left window covers indices t-n+1..=t, right t+1..=t+n
                    let joint_pts = &covs[t - n..t + n];
                    let joint_gram = gram_matrix(model, joint_pts);
                    let left = PdFactor::new(joint_gram.view((0, 0), (n, n)).into_owned())
                        .map_err(|e| locate(e, n, t, "left"))?;
                    let right = PdFactor::new(joint_gram.view((n, n), (n, n)).into_owned())
                        .map_err(|e| locate(e, n, t, "right"))?;
                    let joint =
                        PdFactor::new(joint_gram).map_err(|e| locate(e, n, t, "joint"))?;
                    Ok(CellFactors { left, right, joint })
                })
                .collect()
        })
        .collect();
    Ok(FactorCache {
        grid: grid.clone(),
        model: *model,
        cells: cells?,
    })
}

fn locate(e: Error, n: usize, t: usize, block: &str) -> Error {
    Error::factorization(format!("window n={n}, center t={t}, {block} block: {e}"))
}

impl FactorCache {
    pub fn grid(&self) -> &WindowGrid {
        &self.grid
    }

    pub fn model(&self) -> &KernelModel {
        &self.model
    }
}

/// The map `(n, t) -> A_n(t)` over a window grid.
#[derive(Clone, Debug, PartialEq)]
pub struct StatField {
    grid: WindowGrid,
    /// `values[w][t - n]` for window `sizes[w]`.
    values: Vec<Vec<f64>>,
}

impl StatField {
    /// Builds a field directly from per-window rows; rows must be aligned
    /// with the grid. Mostly useful for calibration tests.
    pub fn from_rows(grid: WindowGrid, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != grid.sizes().len() {
            return Err(Error::invalid_input("row count differs from window count"));
        }
        for (w, row) in values.iter().enumerate() {
            let expect = grid.center_count(grid.sizes()[w])?;
            if row.len() != expect {
                return Err(Error::invalid_input(format!(
                    "row {w} has {} cells; grid expects {expect}",
                    row.len()
                )));
            }
        }
        Ok(StatField { grid, values })
    }

    pub fn grid(&self) -> &WindowGrid {
        &self.grid
    }

    pub fn value(&self, n: usize, t: usize) -> Result<f64> {
        let w = self.window_index(n)?;
        let centers = self.grid.centers(n)?;
        if !centers.contains(&t) {
            return Err(Error::invalid_input(format!(
                "center {t} outside the grid for window {n}"
            )));
        }
        Ok(self.values[w][t - n])
    }

    /// All values for one window size, indexed by `t - n`.
    pub fn window_row(&self, n: usize) -> Result<&[f64]> {
        Ok(&self.values[self.window_index(n)?])
    }

    pub fn window_index(&self, n: usize) -> Result<usize> {
        self.grid
            .sizes()
            .iter()
            .position(|&m| m == n)
            .ok_or_else(|| Error::invalid_input(format!("window {n} not in grid")))
    }

    /// `max_t A_n(t)` per window, in grid order.
    pub fn window_maxima(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    /// Iterates `(n, t, value)` in deterministic grid order.
    pub fn iter_cells(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.grid.sizes().iter().enumerate().flat_map(move |(w, &n)| {
            self.values[w]
                .iter()
                .enumerate()
                .map(move |(i, &v)| (n, n + i, v))
        })
    }

    /// Plot-ready CSV export with columns `n,t,A`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "n,t,A")?;
        for (n, t, v) in self.iter_cells() {
            writeln!(w, "{n},{t},{v}")?;
        }
        Ok(())
    }
}

/// Evaluates the statistic field for one response vector against the cache:
/// `A_n(t) = L(y_l) + L(y_r) - L(y)` with `L` the quadratic-form likelihood.
/// Cells are independent, so evaluation parallelizes without any
/// reduction-order sensitivity.
pub fn stat_field(responses: &[f64], cache: &FactorCache) -> Result<StatField> {
    let grid = cache.grid();
    if responses.len() != grid.total_len() {
        return Err(Error::invalid_input(format!(
            "responses have length {}, grid expects {}",
            responses.len(),
            grid.total_len()
        )));
    }
    let values: Result<Vec<Vec<f64>>> = grid
        .sizes()
        .iter()
        .enumerate()
        .map(|(w, &n)| {
            cache.cells[w]
                .par_iter()
                .enumerate()
                .map(|(i, cell)| {
                    let t = n + i;
                    let y = &responses[t - n..t + n];
                    let (yl, yr) = y.split_at(n);
                    let quad_l = cell.left.quad_form(yl)?;
                    let quad_r = cell.right.quad_form(yr)?;
                    let quad_j = cell.joint.quad_form(y)?;
                    Ok(0.5 * (quad_j - quad_l - quad_r))
                })
                .collect()
        })
        .collect();
    StatField::from_rows(grid.clone(), values?)
}

/// Conditioning summary over the cached joint Gram matrices.
#[derive(Clone, Debug)]
pub struct AssumptionDiagnostics {
    /// Largest spectral norm across all joint Gram matrices.
    pub max_spectral_norm: f64,
    /// Smallest eigenvalue across all cells.
    pub min_eigenvalue: f64,
    /// Largest condition number across all cells.
    pub max_condition: f64,
    /// Per-window `(n, min eigenvalue, max eigenvalue, max condition)`.
    pub per_window: Vec<(usize, f64, f64, f64)>,
    /// Cells `(n, t)` whose condition number exceeds the warning threshold.
    pub flagged_cells: Vec<(usize, usize)>,
    pub warnings: Vec<String>,
}

const CONDITION_WARN: f64 = 1e8;

/// Scans the cache for ill-conditioned windows, which indicate measurement
/// concentrations the method assumes away.
pub fn assumption_diagnostics(cache: &FactorCache) -> AssumptionDiagnostics {
    let grid = cache.grid();
    let mut per_window = Vec::new();
    let mut flagged = Vec::new();
    let (mut g_min, mut g_max, mut g_cond) = (f64::INFINITY, 0.0f64, 0.0f64);
    for (w, &n) in grid.sizes().iter().enumerate() {
        let stats: Vec<(f64, f64)> = cache.cells[w]
            .par_iter()
            .map(|cell| {
                // eigenvalues of K are the squared singular values of L
                let sv = cell.joint.lower().singular_values();
                let top = sv.iter().cloned().fold(0.0f64, f64::max);
                let bot = sv.iter().cloned().fold(f64::INFINITY, f64::min);
                (bot * bot, top * top)
            })
            .collect();
        let (mut w_min, mut w_max, mut w_cond) = (f64::INFINITY, 0.0f64, 0.0f64);
        for (i, &(lo, hi)) in stats.iter().enumerate() {
            let cond = hi / lo;
            if cond > CONDITION_WARN {
                flagged.push((n, n + i));
            }
            w_min = w_min.min(lo);
            w_max = w_max.max(hi);
            w_cond = w_cond.max(cond);
        }
        per_window.push((n, w_min, w_max, w_cond));
        g_min = g_min.min(w_min);
        g_max = g_max.max(w_max);
        g_cond = g_cond.max(w_cond);
    }
    let mut warnings = Vec::new();
    if !flagged.is_empty() {
        warnings.push(format!(
            "{} cell(s) have condition number above {CONDITION_WARN:e}; \
             the design concentrates measurements locally",
            flagged.len()
        ));
    }
    AssumptionDiagnostics {
        max_spectral_norm: g_max,
        min_eigenvalue: g_min,
        max_condition: g_cond,
        per_window,
        flagged_cells: flagged,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_generate, SyntheticSpec};
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    fn toy_model() -> KernelModel {
        KernelModel::rbf(1.0, 0.5, 0.01).unwrap()
    }

    #[test]
    fn grid_enumerates_centers() {
        let g = WindowGrid::new(10, &[2]).unwrap();
        let got: Vec<usize> = g.centers(2).unwrap().collect();
        assert_eq!(got, vec![2, 3, 4, 5, 6, 7, 8]);
    }

    #[test]
    fn grid_minimal_case() {
        let g = WindowGrid::new(4, &[2]).unwrap();
        let got: Vec<usize> = g.centers(2).unwrap().collect();
        assert_eq!(got, vec![2]);
    }

    #[test]
    fn grid_center_counts_match_formula() {
        let g = WindowGrid::new(800, &[40, 20, 10]).unwrap();
        assert_eq!(g.center_count(40).unwrap(), 721);
        assert_eq!(g.center_count(20).unwrap(), 761);
        assert_eq!(g.center_count(10).unwrap(), 781);
        assert_eq!(g.cell_count(), 721 + 761 + 781);
        assert_eq!(g.n_plus(), 40);
        assert_eq!(g.n_minus(), 10);
    }

    #[test]
    fn grid_rejects_oversized_window() {
        assert!(WindowGrid::new(10, &[6]).is_err());
        assert!(WindowGrid::new(10, &[]).is_err());
        assert!(WindowGrid::new(10, &[0]).is_err());
    }

    #[test]
    fn cache_factors_reconstruct_gram_matrices() {
        let ds = synth_generate(&SyntheticSpec::null(8, 0.1, 1)).unwrap();
        let model = toy_model();
        let grid = WindowGrid::new(8, &[4]).unwrap();
        let cache = build_cache(&ds, &model, &grid).unwrap();
        let covs = ds.covariates();
        let cell = &cache.cells[0][0]; // n=4, t=4
        let joint = gram_matrix(&model, &covs[0..8]);
        let left = gram_matrix(&model, &covs[0..4]);
        let right = gram_matrix(&model, &covs[4..8]);
        for (factor, gram) in [
            (&cell.left, left),
            (&cell.right, right),
            (&cell.joint, joint),
        ] {
            let err = (factor.reconstruct() - &gram).norm() / gram.norm();
            assert!(err < 1e-10, "reconstruction error {err}");
        }
    }

    #[test]
    fn zero_amplitude_kernel_gives_zero_field() {
        let ds = synth_generate(&SyntheticSpec::null(12, 0.3, 5)).unwrap();
        let model = KernelModel::rbf(0.0, 0.5, 0.04).unwrap();
        let grid = WindowGrid::new(12, &[3]).unwrap();
        let cache = build_cache(&ds, &model, &grid).unwrap();
        let field = stat_field(ds.responses(), &cache).unwrap();
        for (_, _, v) in field.iter_cells() {
            assert!(v.abs() < 1e-12, "block-diagonal case should cancel: {v}");
        }
    }

    #[test]
    fn field_scales_quadratically_in_responses() {
        let ds = synth_generate(&SyntheticSpec::null(14, 0.2, 6)).unwrap();
        let model = toy_model();
        let grid = WindowGrid::new(14, &[4]).unwrap();
        let cache = build_cache(&ds, &model, &grid).unwrap();
        let base = stat_field(ds.responses(), &cache).unwrap();
        let c = -2.3;
        let scaled: Vec<f64> = ds.responses().iter().map(|y| c * y).collect();
        let got = stat_field(&scaled, &cache).unwrap();
        for ((n, t, a), (_, _, b)) in base.iter_cells().zip(got.iter_cells()) {
            assert_relative_eq!(b, c * c * a, max_relative = 1e-11, epsilon = 1e-12);
            let _ = (n, t);
        }
    }

    #[test]
    fn field_matches_dense_inverse_oracle() {
        let ds = synth_generate(&SyntheticSpec::null(12, 0.15, 9)).unwrap();
        let model = KernelModel::rbf(1.3, 0.4, 0.05).unwrap();
        let grid = WindowGrid::new(12, &[3]).unwrap();
        let cache = build_cache(&ds, &model, &grid).unwrap();
        let field = stat_field(ds.responses(), &cache).unwrap();
        let covs = ds.covariates();
        let quad = |pts: &[Vec<f64>], y: &[f64]| -> f64 {
            let k = gram_matrix(&model, pts);
            let inv = k.try_inverse().unwrap();
            let yv = DVector::from_column_slice(y);
            (yv.transpose() * inv * yv)[(0, 0)]
        };
        for t in 3..=9usize {
            let y = &ds.responses()[t - 3..t + 3];
            let expect = 0.5
                * (quad(&covs[t - 3..t + 3], y)
                    - quad(&covs[t - 3..t], &y[..3])
                    - quad(&covs[t..t + 3], &y[3..]));
            let got = field.value(3, t).unwrap();
            assert!(
                (got - expect).abs() <= 1e-10 * expect.abs().max(1.0),
                "cell t={t}: {got} vs {expect}"
            );
        }
    }

    #[test]
    fn cache_is_deterministic() {
        let ds = synth_generate(&SyntheticSpec::null(16, 0.1, 2)).unwrap();
        let model = toy_model();
        let grid = WindowGrid::new(16, &[4, 3]).unwrap();
        let a = stat_field(
            ds.responses(),
            &build_cache(&ds, &model, &grid).unwrap(),
        )
        .unwrap();
        let b = stat_field(
            ds.responses(),
            &build_cache(&ds, &model, &grid).unwrap(),
        )
        .unwrap();
        assert_eq!(a, b); // bitwise
    }

    #[test]
    fn diagnostics_floor_from_noise() {
        let ds = synth_generate(&SyntheticSpec::null(16, 0.1, 3)).unwrap();
        let model = KernelModel::rbf(1.0, 0.5, 0.01).unwrap();
        let grid = WindowGrid::new(16, &[4]).unwrap();
        let cache = build_cache(&ds, &model, &grid).unwrap();
        let diag = assumption_diagnostics(&cache);
        assert!(diag.min_eigenvalue >= 0.01 - 1e-9, "{}", diag.min_eigenvalue);
        assert!(diag.warnings.is_empty());
    }

    #[test]
    fn diagnostics_flag_duplicated_covariates() {
        // nearly coincident design points inside one window at tiny noise
        let mut covs: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64]).collect();
        for i in 0..6 {
            covs[i] = vec![5.0 + 1e-9 * i as f64];
        }
        let responses: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let ds = Dataset::new(covs, responses).unwrap();
        let model = KernelModel::rbf(20.0, 2.0, 1e-6).unwrap();
        let grid = WindowGrid::new(12, &[3]).unwrap();
        let cache = build_cache(&ds, &model, &grid).unwrap();
        let diag = assumption_diagnostics(&cache);
        assert!(
            !diag.flagged_cells.is_empty() && !diag.warnings.is_empty(),
            "expected a conditioning warning, got {diag:?}"
        );
    }

    #[test]
    fn csv_export_shape() {
        let ds = synth_generate(&SyntheticSpec::null(10, 0.1, 4)).unwrap();
        let cache = build_cache(&ds, &toy_model(), &WindowGrid::new(10, &[3]).unwrap()).unwrap();
        let field = stat_field(ds.responses(), &cache).unwrap();
        let mut buf = Vec::new();
        field.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("n,t,A"));
        assert_eq!(lines.count(), 5); // centers 3..=7
    }
}
