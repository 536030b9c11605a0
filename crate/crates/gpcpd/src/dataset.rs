// SPDX-License-Identifier: MIT OR Apache-2.0

//! Time-ordered regression data: CSV ingestion, the price-series-to-regression
//! transform, synthetic generation and the observed-break-extent functional.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Time-ordered covariate/response pairs. Index order is the temporal order;
/// values are immutable after construction. Time indices used throughout the
/// crate are 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    covariates: Vec<Vec<f64>>,
    responses: Vec<f64>,
    dim: usize,
}

impl Dataset {
    pub fn new(covariates: Vec<Vec<f64>>, responses: Vec<f64>) -> Result<Self> {
        if covariates.len() != responses.len() {
            return Err(Error::invalid_input(format!(
                "covariate and response counts differ: {} vs {}",
                covariates.len(),
                responses.len()
            )));
        }
        if covariates.len() < 2 {
            return Err(Error::invalid_input(
                "a dataset needs at least two observations",
            ));
        }
        let dim = covariates[0].len();
        if dim == 0 {
            return Err(Error::invalid_input("covariates must have dimension >= 1"));
        }
        for (i, x) in covariates.iter().enumerate() {
            if x.len() != dim {
                return Err(Error::invalid_input(format!(
                    "covariate {} has dimension {}, expected {dim}",
                    i + 1,
                    x.len()
                )));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid_input(format!(
                    "covariate {} contains a non-finite value",
                    i + 1
                )));
            }
        }
        if let Some(i) = responses.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid_input(format!(
                "response {} is not finite",
                i + 1
            )));
        }
        Ok(Dataset {
            covariates,
            responses,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn covariates(&self) -> &[Vec<f64>] {
        &self.covariates
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    /// Sub-dataset over the 1-based inclusive index range `[start, end]`,
    /// preserving temporal order.
    pub fn segment(&self, start: usize, end: usize) -> Result<Dataset> {
        if start == 0 || end > self.len() || start > end {
            return Err(Error::invalid_input(format!(
                "segment {start}..={end} out of range for dataset of length {}",
                self.len()
            )));
        }
        Dataset::new(
            self.covariates[start - 1..end].to_vec(),
            self.responses[start - 1..end].to_vec(),
        )
    }
}

/// Loads a dataset from a CSV file: UTF-8, header row required, `,` delimiter,
/// `.` decimal point, one row per time step, rows in temporal order. Missing
/// values are rejected rather than imputed.
pub fn load_csv(
    path: impl AsRef<Path>,
    covariate_columns: &[String],
    response_column: &str,
) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(format!("{}: {e}", path.display())))?;

    let headers = reader
        .headers()
        .map_err(|e| Error::csv(format!("{}: {e}", path.display())))?
        .clone();
    let col_index = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::csv(format!(
                "{}: column '{name}' not found in header [{}]",
                path.display(),
                headers.iter().collect::<Vec<_>>().join(", ")
            ))
        })
    };
    if covariate_columns.is_empty() {
        return Err(Error::invalid_input(
            "at least one covariate column is required",
        ));
    }
    let cov_idx: Vec<usize> = covariate_columns
        .iter()
        .map(|c| col_index(c))
        .collect::<Result<_>>()?;
    let resp_idx = col_index(response_column)?;

    let mut covariates = Vec::new();
    let mut responses = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let row1 = row + 1; // 1-based data row, excluding the header
        let record = record.map_err(|e| Error::csv(format!("{}: {e}", path.display())))?;
        let parse = |idx: usize, col: &str| -> Result<f64> {
            let raw = record.get(idx).ok_or_else(|| {
                Error::csv(format!(
                    "{}: row {row1} is missing column '{col}'",
                    path.display()
                ))
            })?;
            raw.parse::<f64>().map_err(|_| {
                Error::csv(format!(
                    "{}: row {row1}, column '{col}': '{raw}' is not a number",
                    path.display()
                ))
            })
        };
        let mut x = Vec::with_capacity(cov_idx.len());
        for (i, &idx) in cov_idx.iter().enumerate() {
            x.push(parse(idx, &covariate_columns[i])?);
        }
        covariates.push(x);
        responses.push(parse(resp_idx, response_column)?);
    }
    if responses.is_empty() {
        return Err(Error::csv(format!("{}: empty dataset", path.display())));
    }
    Dataset::new(covariates, responses)
}

/// Loads a single-column price series (plus an optional `date` column carried
/// through for report labelling).
pub fn load_price_csv(
    path: impl AsRef<Path>,
    price_column: &str,
) -> Result<(Vec<f64>, Option<Vec<String>>)> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::csv(format!("{}: {e}", path.display())))?
        .clone();
    let price_idx = headers
        .iter()
        .position(|h| h == price_column)
        .ok_or_else(|| {
            Error::csv(format!(
                "{}: column '{price_column}' not found",
                path.display()
            ))
        })?;
    let date_idx = headers.iter().position(|h| h == "date");

    let mut prices = Vec::new();
    let mut dates = date_idx.map(|_| Vec::new());
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::csv(format!("{}: {e}", path.display())))?;
        let raw = record.get(price_idx).ok_or_else(|| {
            Error::csv(format!(
                "{}: row {} is missing column '{price_column}'",
                path.display(),
                row + 1
            ))
        })?;
        let price = raw.parse::<f64>().map_err(|_| {
            Error::csv(format!(
                "{}: row {}, column '{price_column}': '{raw}' is not a number",
                path.display(),
                row + 1
            ))
        })?;
        prices.push(price);
        if let (Some(dates), Some(idx)) = (dates.as_mut(), date_idx) {
            dates.push(record.get(idx).unwrap_or("").to_string());
        }
    }
    if prices.is_empty() {
        return Err(Error::csv(format!("{}: empty dataset", path.display())));
    }
    Ok((prices, dates))
}

/// Turns a strictly positive price series into a regression dataset with
/// covariates `x_t = X_t` and responses `y_t = (X_{t+1} - X_t) / X_t`.
/// A series of length `L` produces a dataset of length `L - 1`.
pub fn sde_transform(prices: &[f64]) -> Result<Dataset> {
    if prices.len() < 2 {
        return Err(Error::invalid_input(
            "price series must contain at least two observations",
        ));
    }
    if let Some(i) = prices.iter().position(|&p| !(p > 0.0) || !p.is_finite()) {
        return Err(Error::invalid_input(format!(
            "price {} is not strictly positive: {}",
            i + 1,
            prices[i]
        )));
    }
    let n = prices.len() - 1;
    let covariates: Vec<Vec<f64>> = prices[..n].iter().map(|&p| vec![p]).collect();
    let responses: Vec<f64> = (0..n)
        .map(|t| (prices[t + 1] - prices[t]) / prices[t])
        .collect();
    Dataset::new(covariates, responses)
}

/// Synthetic-data specification: `n` equidistant covariates over `domain` in
/// a seed-determined shuffled order; responses are a sine with the pre-break
/// phase before `tau` and the post-break phase from `tau` onward (1-based),
/// plus centered Gaussian noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    /// Break index, or `None` for a no-break dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<usize>,
    /// Phase shift before the break, in radians.
    pub phase_pre: f64,
    /// Phase shift from the break onward, in radians.
    pub phase_post: f64,
    pub noise_sd: f64,
    pub seed: u64,
    /// Closed interval carrying the equidistant covariates.
    pub domain: (f64, f64),
}

impl SyntheticSpec {
    /// The no-break configuration: `sin(x)` plus noise on `[0, pi]`.
    pub fn null(n: usize, noise_sd: f64, seed: u64) -> Self {
        SyntheticSpec {
            n,
            tau: None,
            phase_pre: 0.0,
            phase_post: 0.0,
            noise_sd,
            seed,
            domain: (0.0, std::f64::consts::PI),
        }
    }

    /// Single-break configuration with phases `(0, phi)` on `[0, pi]`.
    pub fn single_break(n: usize, tau: usize, phi: f64, noise_sd: f64, seed: u64) -> Self {
        SyntheticSpec {
            n,
            tau: Some(tau),
            phase_pre: 0.0,
            phase_post: phi,
            noise_sd,
            seed,
            domain: (0.0, std::f64::consts::PI),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::invalid_input("synthetic size must be at least 2"));
        }
        if let Some(tau) = self.tau {
            if tau <= 1 || tau > self.n {
                return Err(Error::invalid_input(format!(
                    "break index must satisfy 1 < tau <= n; got tau={tau}, n={}",
                    self.n
                )));
            }
        }
        if !self.noise_sd.is_finite() || self.noise_sd < 0.0 {
            return Err(Error::invalid_input(format!(
                "noise standard deviation must be >= 0; got {}",
                self.noise_sd
            )));
        }
        if !(self.domain.1 > self.domain.0) {
            return Err(Error::invalid_input(format!(
                "degenerate covariate domain [{}, {}]",
                self.domain.0, self.domain.1
            )));
        }
        Ok(())
    }

    fn mean_at(&self, x: f64, index1: usize) -> f64 {
        let phase = match self.tau {
            Some(tau) if index1 >= tau => self.phase_post,
            _ => self.phase_pre,
        };
        (x + phase).sin()
    }
}

/// Generates a synthetic dataset. Covariates are the `n` equidistant points
/// of the domain (endpoints included) in a seed-determined uniform shuffle;
/// the break lives in the time index, never in the covariate value. Output is
/// deterministic given the seed.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.domain;
    let step = (hi - lo) / (spec.n - 1) as f64;
    let mut xs: Vec<f64> = (0..spec.n).map(|i| lo + step * i as f64).collect();
    xs.shuffle(&mut rng);

    let responses: Vec<f64> = if spec.noise_sd > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sd).expect("validated noise sd");
        xs.iter()
            .enumerate()
            .map(|(i, &x)| spec.mean_at(x, i + 1) + noise.sample(&mut rng))
            .collect()
    } else {
        xs.iter()
            .enumerate()
            .map(|(i, &x)| spec.mean_at(x, i + 1))
            .collect()
    };
    Dataset::new(xs.into_iter().map(|x| vec![x]).collect(), responses)
}

/// Generates a multi-segment synthetic dataset: `breaks[k]` is the 1-based
/// first index governed by `phases[k + 1]`. Used by the multiple-break
/// experiments; a single break reduces to [`synth_generate`].
pub fn synth_generate_multi(
    n: usize,
    breaks: &[usize],
    phases: &[f64],
    noise_sd: f64,
    seed: u64,
    domain: (f64, f64),
) -> Result<Dataset> {
    if phases.len() != breaks.len() + 1 {
        return Err(Error::invalid_input(format!(
            "need one phase per segment: {} breaks require {} phases, got {}",
            breaks.len(),
            breaks.len() + 1,
            phases.len()
        )));
    }
    if breaks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid_input("break indices must be increasing"));
    }
    if let Some(&b) = breaks.iter().find(|&&b| b <= 1 || b > n) {
        return Err(Error::invalid_input(format!(
            "break index {b} out of range for n={n}"
        )));
    }
    let base = SyntheticSpec::null(n, noise_sd, seed);
    base.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = domain;
    if !(hi > lo) {
        return Err(Error::invalid_input("degenerate covariate domain"));
    }
    let step = (hi - lo) / (n - 1) as f64;
    let mut xs: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
    xs.shuffle(&mut rng);

    let phase_for = |index1: usize| -> f64 {
        let seg = breaks.iter().take_while(|&&b| index1 >= b).count();
        phases[seg]
    };
    let responses: Vec<f64> = if noise_sd > 0.0 {
        let noise = Normal::new(0.0, noise_sd).expect("validated noise sd");
        xs.iter()
            .enumerate()
            .map(|(i, &x)| (x + phase_for(i + 1)).sin() + noise.sample(&mut rng))
            .collect()
    } else {
        xs.iter()
            .enumerate()
            .map(|(i, &x)| (x + phase_for(i + 1)).sin())
            .collect()
    };
    Dataset::new(xs.into_iter().map(|x| vec![x]).collect(), responses)
}

/// Root-mean-square gap between two regression functions over the `n`
/// covariates from index `tau` onward (1-based):
/// `sqrt( (1/n) * sum_{i=tau}^{tau+n-1} (f1(X_i) - f2(X_i))^2 )`.
pub fn break_extent(
    f1: impl Fn(&[f64]) -> f64,
    f2: impl Fn(&[f64]) -> f64,
    covariates: &[Vec<f64>],
    tau: usize,
    n: usize,
) -> Result<f64> {
    if tau == 0 || n == 0 || tau + n - 1 > covariates.len() {
        return Err(Error::invalid_input(format!(
            "break-extent window {tau}..{} exceeds data range 1..{}",
            tau + n - 1,
            covariates.len()
        )));
    }
    let sum: f64 = covariates[tau - 1..tau + n - 1]
        .iter()
        .map(|x| {
            let d = f1(x) - f2(x);
            d * d
        })
        .sum();
    Ok((sum / n as f64).sqrt())
}

/// Draws a geometric random walk whose relative drift switches at `tau`
/// (1-based step index); used to exercise the price-series path with a known
/// ground truth.
pub fn synth_prices(
    len: usize,
    start: f64,
    tau: usize,
    drift_pre: f64,
    drift_post: f64,
    vol: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if len < 2 || start <= 0.0 {
        return Err(Error::invalid_input("need len >= 2 and a positive start"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut prices = Vec::with_capacity(len);
    let mut p = start;
    prices.push(p);
    for t in 1..len {
        let drift = if t < tau { drift_pre } else { drift_post };
        let ret: f64 = drift + vol * normal.sample(&mut rng);
        // clamp keeps the series strictly positive even in wild draws
        p *= (1.0 + ret).max(0.01);
        prices.push(p);
    }
    let _: f64 = rng.random(); // keep the stream length independent of branches
    Ok(prices)
}
