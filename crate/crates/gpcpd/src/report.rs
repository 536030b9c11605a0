// SPDX-License-Identifier: MIT OR Apache-2.0

//! Plain-text run reports: a key-value header followed by CSV blocks, so
//! downstream plotting needs no custom parser. Output is byte-deterministic
//! for a given configuration and seed; wall-clock and thread counts never
//! appear.

use std::io::Write;

use crate::calibrate::{CalibrationMode, CalibrationResult, Thresholds};
use crate::config::{IndexRange, PipelineConfig};
use crate::detect::MultiBreakReport;
use crate::error::Result;

/// Static facts about one detection run.
pub struct RunMeta<'a> {
    pub command: &'a str,
    pub config: &'a PipelineConfig,
    /// Effective first-segment bootstrap range.
    pub iboot: IndexRange,
    pub data_len: usize,
    pub data_dim: usize,
    /// Date labels aligned with the dataset indices, for price-series runs.
    pub dates: Option<&'a [String]>,
}

fn mode_label(mode: CalibrationMode) -> &'static str {
    match mode {
        CalibrationMode::PerCell => "per-cell",
        CalibrationMode::Simplified => "simplified",
    }
}

fn windows_label(windows: &[usize]) -> String {
    windows
        .iter()
        .map(|w| w.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Writes the detection report document.
pub fn write_detection_report(
    mut w: impl Write,
    meta: &RunMeta<'_>,
    result: &MultiBreakReport,
) -> Result<()> {
    let cfg = meta.config;
    writeln!(w, "# gpcpd detection report")?;
    writeln!(w, "format: 1")?;
    writeln!(w, "command: {}", meta.command)?;
    writeln!(w, "n: {}", meta.data_len)?;
    writeln!(w, "dim: {}", meta.data_dim)?;
    writeln!(w, "breaks_detected: {}", result.breaks.len())?;
    writeln!(w)?;

    writeln!(w, "[config]")?;
    writeln!(w, "alpha: {}", cfg.alpha)?;
    writeln!(w, "windows: {}", windows_label(&cfg.windows))?;
    writeln!(w, "iboot: {}", meta.iboot)?;
    writeln!(w, "replicates: {}", cfg.replicates)?;
    writeln!(w, "seed: {}", cfg.seed)?;
    writeln!(w, "mode: {}", mode_label(cfg.mode))?;
    writeln!(w, "rho: {}", cfg.rho)?;
    writeln!(w, "refit_segments: {}", cfg.refit_segments)?;
    writeln!(w, "min_iboot: {}", cfg.min_iboot)?;
    writeln!(w, "evidence_starts: {}", cfg.evidence_starts)?;
    writeln!(w, "evidence_max_iterations: {}", cfg.evidence_max_iterations)?;
    match &cfg.kernel {
        Some(k) => writeln!(
            w,
            "kernel: fixed theta1={} theta2={} sigma2={} rho={}",
            k.theta1, k.theta2, k.sigma2, k.rho
        )?,
        None => writeln!(w, "kernel: learned")?,
    }
    writeln!(w)?;

    writeln!(w, "[breaks]")?;
    if meta.dates.is_some() {
        writeln!(
            w,
            "index,change_point,n_star,tau_tilde,segment_start,localization_fallback,date"
        )?;
    } else {
        writeln!(
            w,
            "index,change_point,n_star,tau_tilde,segment_start,localization_fallback"
        )?;
    }
    for (i, b) in result.breaks.iter().enumerate() {
        let base = format!(
            "{},{},{},{},{},{}",
            i + 1,
            b.change_point,
            b.n_star,
            b.tau_tilde,
            b.segment_start,
            b.localization_fallback
        );
        match meta.dates {
            Some(dates) => {
                let date = dates.get(b.change_point - 1).map(|s| s.as_str()).unwrap_or("");
                writeln!(w, "{base},{date}")?;
            }
            None => writeln!(w, "{base}")?,
        }
    }
    writeln!(w)?;

    writeln!(w, "[segments]")?;
    writeln!(
        w,
        "index,start,end,windows,iboot,reject,alpha_star,n_star,tau_tilde,change_point,\
         theta1,theta2,sigma2,rho"
    )?;
    for (i, s) in result.segments.iter().enumerate() {
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},\"{}\",{},{},{},{},{},{},{},{},{},{}",
            i + 1,
            s.start,
            s.end,
            windows_label(&s.windows),
            s.iboot,
            s.report.reject,
            s.calibration.alpha_star,
            opt(s.report.earliest_window),
            opt(s.report.tau_tilde),
            opt(s.report.change_point),
            s.model.theta1,
            s.model.theta2,
            s.model.sigma2,
            s.model.rho
        )?;
    }
    writeln!(w)?;

    writeln!(w, "[first_exceedance]")?;
    writeln!(w, "segment,n,tau_tilde")?;
    for (i, s) in result.segments.iter().enumerate() {
        for &(n, first) in &s.report.first_exceedance {
            writeln!(
                w,
                "{},{},{}",
                i + 1,
                n,
                first.map(|t| t.to_string()).unwrap_or_default()
            )?;
        }
    }
    writeln!(w)?;

    writeln!(w, "[diagnostics]")?;
    for d in &result.diagnostics {
        writeln!(w, "- {d}")?;
    }
    Ok(())
}

/// Writes one segment's calibration document, thresholds included.
pub fn write_calibration(
    mut w: impl Write,
    segment_index: usize,
    cal: &CalibrationResult,
) -> Result<()> {
    writeln!(w, "# gpcpd calibration")?;
    writeln!(w, "segment: {segment_index}")?;
    writeln!(w, "alpha: {}", cal.alpha)?;
    writeln!(w, "alpha_star: {}", cal.alpha_star)?;
    writeln!(w, "replicates: {}", cal.replicates)?;
    writeln!(w, "mode: {}", mode_label(cal.mode))?;
    writeln!(w, "seed: {}", cal.seed)?;
    for warning in &cal.warnings {
        writeln!(w, "warning: {warning}")?;
    }
    writeln!(w)?;
    writeln!(w, "[thresholds]")?;
    match &cal.thresholds {
        Thresholds::PerWindow(levels) => {
            writeln!(w, "n,x")?;
            for (&n, x) in cal.grid.sizes().iter().zip(levels) {
                writeln!(w, "{n},{x}")?;
            }
        }
        Thresholds::PerCell(levels) => {
            writeln!(w, "n,t,x")?;
            for (&n, row) in cal.grid.sizes().iter().zip(levels) {
                for (i, x) in row.iter().enumerate() {
                    writeln!(w, "{n},{},{x}", n + i)?;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_generate, SyntheticSpec};
    use crate::detect::detect_multiple;
    use crate::kernel::KernelModel;

    #[test]
    fn report_document_is_deterministic_and_complete() {
        let data = synth_generate(&SyntheticSpec::null(60, 0.1, 5)).unwrap();
        let config = PipelineConfig {
            windows: vec![6],
            replicates: 100,
            kernel: Some(KernelModel::rbf(1.0, 0.5, 0.01).unwrap()),
            ..PipelineConfig::default()
        };
        let result = detect_multiple(&data, &config).unwrap();
        let meta = RunMeta {
            command: "detect",
            config: &config,
            iboot: config.effective_iboot(60).unwrap(),
            data_len: 60,
            data_dim: 1,
            dates: None,
        };
        let mut a = Vec::new();
        write_detection_report(&mut a, &meta, &result).unwrap();
        let mut b = Vec::new();
        write_detection_report(&mut b, &meta, &result).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert!(text.contains("[config]"));
        assert!(text.contains("[segments]"));
        assert!(text.contains("kernel: fixed theta1=1"));

        let mut cal_buf = Vec::new();
        write_calibration(&mut cal_buf, 1, &result.segments[0].calibration).unwrap();
        let cal_text = String::from_utf8(cal_buf).unwrap();
        assert!(cal_text.contains("[thresholds]"));
        assert!(cal_text.lines().any(|l| l.starts_with("6,")));
    }
}
