// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pipeline configuration: statistical settings shared by the detection
//! pipeline, the experiment harness and the command-line front end, plus the
//! config-file layer that mirrors every CLI flag.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibrate::CalibrationMode;
use crate::error::{Error, Result};
use crate::kernel::{KernelModel, SmoothnessClass, SmoothnessSpec};

/// A 1-based inclusive index range, written `start:end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct IndexRange {
    pub start: usize,
    pub end: usize,
}

impl IndexRange {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start == 0 || end < start {
            return Err(Error::invalid_input(format!(
                "index range must satisfy 1 <= start <= end; got {start}:{end}"
            )));
        }
        Ok(IndexRange { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_inclusive(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }
}

impl fmt::Display for IndexRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.start, self.end)
    }
}

impl FromStr for IndexRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| Error::invalid_input(format!("expected start:end, got '{s}'")))?;
        let start = a
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::invalid_input(format!("bad range start '{a}'")))?;
        let end = b
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::invalid_input(format!("bad range end '{b}'")))?;
        IndexRange::new(start, end)
    }
}

impl TryFrom<String> for IndexRange {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<IndexRange> for String {
    fn from(r: IndexRange) -> String {
        r.to_string()
    }
}

/// How the regularization multiplier is chosen: absorbed into the learned
/// amplitude (the default), or fixed by a theoretical schedule, in which case
/// the amplitude stays at 1 and only lengthscale and noise are learned.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RhoMode {
    Learned,
    Sobolev { radius: f64, aleph: f64 },
    Hoelder { radius: f64, aleph: f64 },
}

impl RhoMode {
    pub fn smoothness(&self) -> Result<Option<SmoothnessSpec>> {
        match *self {
            RhoMode::Learned => Ok(None),
            RhoMode::Sobolev { radius, aleph } => Ok(Some(SmoothnessSpec::new(
                SmoothnessClass::Sobolev,
                radius,
                aleph,
            )?)),
            RhoMode::Hoelder { radius, aleph } => Ok(Some(SmoothnessSpec::new(
                SmoothnessClass::Hoelder,
                radius,
                aleph,
            )?)),
        }
    }
}

impl fmt::Display for RhoMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RhoMode::Learned => write!(f, "learned"),
            RhoMode::Sobolev { radius, aleph } => write!(f, "sobolev:{radius},{aleph}"),
            RhoMode::Hoelder { radius, aleph } => write!(f, "hoelder:{radius},{aleph}"),
        }
    }
}

impl FromStr for RhoMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "learned" {
            return Ok(RhoMode::Learned);
        }
        let (kind, params) = s.split_once(':').ok_or_else(|| {
            Error::invalid_input(format!(
                "rho mode must be learned, sobolev:B,aleph or hoelder:B,aleph; got '{s}'"
            ))
        })?;
        let (b, a) = params.split_once(',').ok_or_else(|| {
            Error::invalid_input(format!("rho schedule needs B,aleph; got '{params}'"))
        })?;
        let radius = b
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::invalid_input(format!("bad smoothness radius '{b}'")))?;
        let aleph = a
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::invalid_input(format!("bad smoothness index '{a}'")))?;
        match kind {
            "sobolev" => Ok(RhoMode::Sobolev { radius, aleph }),
            "hoelder" => Ok(RhoMode::Hoelder { radius, aleph }),
            other => Err(Error::invalid_input(format!("unknown rho mode '{other}'"))),
        }
    }
}

/// Statistical configuration of a detection run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Significance level.
    pub alpha: f64,
    /// Window sizes.
    pub windows: Vec<usize>,
    /// Bootstrap index range of the first segment; when absent, a default of
    /// `1:min(500, floor(5N/8))` is derived from the data length.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iboot: Option<IndexRange>,
    /// Bootstrap replicate count.
    pub replicates: usize,
    pub seed: u64,
    pub mode: CalibrationMode,
    pub rho: RhoMode,
    /// Re-run evidence maximization on every recursion segment instead of
    /// reusing the first segment's hyperparameters.
    pub refit_segments: bool,
    /// Smallest admissible bootstrap index set in the recursion; segments
    /// shorter than `2 n_min + min_iboot` stop the recursion.
    pub min_iboot: usize,
    /// Fixed hyperparameters; when set, evidence maximization is skipped.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelModel>,
    /// Latin-hypercube restarts for evidence maximization.
    pub evidence_starts: usize,
    pub evidence_max_iterations: usize,
    /// Worker-thread cap; `None` means all available cores. Results do not
    /// depend on this value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            alpha: 0.01,
            windows: vec![40, 20, 10],
            iboot: None,
            replicates: 1000,
            seed: 0,
            mode: CalibrationMode::Simplified,
            rho: RhoMode::Learned,
            refit_segments: false,
            min_iboot: 10,
            kernel: None,
            evidence_starts: 8,
            evidence_max_iterations: 60,
            threads: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self, data_len: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid_input(format!(
                "alpha must lie in (0, 1); got {}",
                self.alpha
            )));
        }
        if self.windows.is_empty() {
            return Err(Error::invalid_input("at least one window size is required"));
        }
        if let Some(&n) = self.windows.iter().find(|&&n| n == 0 || 2 * n > data_len) {
            return Err(Error::invalid_input(format!(
                "window size {n} infeasible for N = {data_len} (need 0 < 2n <= N)"
            )));
        }
        if self.replicates < 100 {
            return Err(Error::invalid_input(format!(
                "at least 100 bootstrap replicates are required; got {}",
                self.replicates
            )));
        }
        if self.min_iboot == 0 {
            return Err(Error::invalid_input("min_iboot must be at least 1"));
        }
        if self.evidence_starts == 0 {
            return Err(Error::invalid_input("need at least one evidence restart"));
        }
        let iboot = self.effective_iboot(data_len)?;
        if iboot.end > data_len {
            return Err(Error::invalid_input(format!(
                "bootstrap range {iboot} exceeds the data length {data_len}"
            )));
        }
        if let Some(kernel) = &self.kernel {
            kernel.validate()?;
        }
        self.rho.smoothness()?;
        Ok(())
    }

    /// The bootstrap range of the first segment: the configured one, or the
    /// derived default `1:min(500, floor(5N/8))`.
    pub fn effective_iboot(&self, data_len: usize) -> Result<IndexRange> {
        match self.iboot {
            Some(r) => Ok(r),
            None => {
                let len = (5 * data_len / 8).clamp(1, 500);
                IndexRange::new(1, len.min(data_len))
            }
        }
    }
}

/// Config-file mirror of the command line: every flag has an equivalent
/// field, and explicit CLI flags take precedence over file values.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub alpha: Option<f64>,
    pub windows: Option<Vec<usize>>,
    pub iboot: Option<IndexRange>,
    pub reps: Option<usize>,
    pub seed: Option<u64>,
    pub mode: Option<CalibrationMode>,
    pub rho: Option<RhoMode>,
    pub refit_segments: Option<bool>,
    pub min_iboot: Option<usize>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub covariates: Option<Vec<String>>,
    pub response: Option<String>,
    pub price_column: Option<String>,
    /// Fixed kernel hyperparameters (`theta1`, `theta2`, `sigma2`, `rho`).
    pub kernel: Option<KernelModel>,
    pub evidence_starts: Option<usize>,
    pub evidence_max_iterations: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text)
            .map_err(|e| Error::invalid_input(format!("{}: {e}", path.display())))
    }
}
