//! Velocity calibration: a weighted straight line through fitted peak
//! channels against the reference velocities of the sextet and its
//! sidebands.
//!
//! The isomer shift is not corrected separately; it ends up in the
//! intercept.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::physics::{Direction, HyperfineScheme, LineClass, ScanParams};
use crate::specfit::{nominal_channel, SpectrumFit};

/// Quoted sideband offset of the reference lines (mm/s). Direct
/// conversion of the drive frequency gives ≈8.42 mm/s instead.
pub const QUOTED_SIDEBAND_SPACING_MM_S: f64 = 8.244;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    /// Sideband offset of the references; `None` derives it from the SAW
    /// frequency.
    pub sideband_spacing_mm_s: Option<f64>,
    /// References closer than this are one blended reference. The default
    /// is half the default linewidth, where the fit template merges peaks.
    pub blend_tolerance_mm_s: f64,
    /// Peaks farther than this from every reference stay unmatched.
    pub match_tolerance_mm_s: f64,
    pub include_blended: bool,
    pub min_references: usize,
    /// Matches pulled farther than this (in σ) are dropped one at a time.
    pub outlier_pull: f64,
    /// Gate on the inverse-variance weighted residual RMS.
    pub rms_gate_mm_s: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            sideband_spacing_mm_s: None,
            blend_tolerance_mm_s: 0.125,
            match_tolerance_mm_s: 0.6,
            include_blended: false,
            min_references: 6,
            outlier_pull: 4.0,
            rms_gate_mm_s: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub velocity_mm_s: f64,
    /// `(line, order)` pairs merged into this reference.
    pub components: Vec<(usize, i32)>,
    pub blended: bool,
}

/// Sextet lines shifted by `n·spacing` for `|n| ≤ max_order`, inside the
/// open window, with near-coincident positions merged.
pub fn reference_velocities(
    scheme: &HyperfineScheme,
    spacing_mm_s: f64,
    max_order: u32,
    window: (f64, f64),
    blend_tolerance: f64,
) -> Vec<Reference> {
    let m = max_order as i32;
    let mut raw: Vec<(f64, usize, i32)> = Vec::new();
    for (line, &v) in scheme.line_velocities_mm_s.iter().enumerate() {
        for n in -m..=m {
            let vel = v + n as f64 * spacing_mm_s;
            if vel > window.0 && vel < window.1 {
                raw.push((vel, line, n));
            }
        }
    }
    raw.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(Vec<f64>, Vec<(usize, i32)>)> = Vec::new();
    for (v, line, n) in raw {
        match out.last_mut() {
            Some((vs, comps)) if v - vs.last().unwrap() <= blend_tolerance => {
                vs.push(v);
                comps.push((line, n));
            }
            _ => out.push((vec![v], vec![(line, n)])),
        }
    }
    out.into_iter()
        .map(|(vs, components)| Reference {
            velocity_mm_s: vs.iter().sum::<f64>() / vs.len() as f64,
            blended: components.len() > 1,
            components,
        })
        .collect()
}

/// Moves each blended reference to the intensity-weighted centroid of its
/// components, with `order_weights[|n|]` the relative power of order `n`.
/// Orders beyond the slice get zero weight.
pub fn weight_blended(refs: &mut [Reference], scheme: &HyperfineScheme, spacing_mm_s: f64, order_weights: &[f64]) {
    for r in refs.iter_mut().filter(|r| r.blended) {
        let (mut sw, mut swv) = (0.0, 0.0);
        for &(line, n) in &r.components {
            let w = scheme.line_intensity(line) * order_weights.get(n.unsigned_abs() as usize).copied().unwrap_or(0.0).max(0.0);
            sw += w;
            swv += w * (scheme.line_velocities_mm_s[line] + n as f64 * spacing_mm_s);
        }
        if sw > 0.0 {
            r.velocity_mm_s = swv / sw;
        }
    }
}

/// Relative order powers `A_n / A_0` read from the pure inner-line groups.
pub fn order_weights_from_fit(fit: &SpectrumFit) -> Vec<f64> {
    let amp = |order: u32| {
        fit.groups
            .iter()
            .find(|g| g.composition.len() == 1 && g.composition[0].class == LineClass::Inner && g.composition[0].order == order)
            .map(|g| g.amplitude.max(0.0))
    };
    let Some(a0) = amp(0).filter(|a| *a > 0.0) else { return vec![1.0] };
    (0..=fit.max_order()).map(|n| amp(n).unwrap_or(0.0) / a0).collect()
}

/// A fitted peak position handed to the regression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakPosition {
    pub index: usize,
    pub channel: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMatch {
    pub peak: usize,
    pub channel: f64,
    pub channel_sigma: f64,
    pub reference_velocity_mm_s: f64,
    pub blended: bool,
    pub used: bool,
    /// Rejected for a pull beyond `outlier_pull`.
    pub outlier: bool,
    pub residual_mm_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendTest {
    pub coefficient: f64,
    pub sigma: f64,
    pub t: f64,
    pub dof: usize,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub direction: Direction,
    pub drive_power_w: f64,
    /// mm/s per channel.
    pub slope: f64,
    /// Velocity of channel 0 (mm/s).
    pub intercept: f64,
    /// Scaled by `√χ²_ν` when that exceeds one.
    pub slope_uncertainty: f64,
    pub intercept_uncertainty: f64,
    pub slope_intercept_covariance: f64,
    pub sideband_spacing_mm_s: f64,
    pub matches: Vec<ReferenceMatch>,
    /// Inverse-variance weighted residual RMS.
    pub rms_mm_s: f64,
    pub chi2_reduced: f64,
    /// Significance of a quadratic term added to the line.
    pub quadratic_trend: TrendTest,
}

impl CalibrationResult {
    pub fn velocity(&self, channel: f64) -> f64 {
        self.intercept + self.slope * channel
    }

    pub fn channel(&self, velocity_mm_s: f64) -> f64 {
        (velocity_mm_s - self.intercept) / self.slope
    }
}

/// Calibrates the free-position peaks of a spectrum fit.
pub fn calibrate(
    fit: &SpectrumFit,
    scheme: &HyperfineScheme,
    sideband_spacing_mm_s: f64,
    cfg: &CalibrationConfig,
) -> Result<CalibrationResult> {
    let scan = fit.scan.ok_or_else(|| Error::InvalidInput("fit carries no scan metadata".into()))?;
    let peaks: Vec<PeakPosition> = fit
        .peaks
        .iter()
        .enumerate()
        .filter(|(_, p)| p.free && p.position_sigma.is_finite() && p.position_sigma > 0.0)
        .map(|(index, p)| PeakPosition { index, channel: p.position, sigma: p.position_sigma })
        .collect();
    let mut refs = reference_velocities(
        scheme,
        sideband_spacing_mm_s,
        fit.max_order(),
        (scan.v_min_mm_s, scan.v_max_mm_s),
        cfg.blend_tolerance_mm_s,
    );
    weight_blended(&mut refs, scheme, sideband_spacing_mm_s, &order_weights_from_fit(fit));
    let mut out = calibrate_positions(&peaks, &refs, &scan, cfg)?;
    out.direction = fit.direction;
    out.drive_power_w = fit.drive_power_w;
    out.sideband_spacing_mm_s = sideband_spacing_mm_s;
    Ok(out)
}

/// Matches positions to references, starting from the scan's nominal map,
/// and regresses velocity on channel.
pub fn calibrate_positions(
    peaks: &[PeakPosition],
    refs: &[Reference],
    scan: &ScanParams,
    cfg: &CalibrationConfig,
) -> Result<CalibrationResult> {
    scan.validate()?;
    if cfg.min_references < 3 {
        return Err(Error::Config("calibration.min_references must be ≥ 3".into()));
    }
    let w = scan.channel_width();
    let (mut intercept, mut slope) = match scan.direction {
        Direction::Accelerating => (scan.v_min_mm_s, w),
        Direction::Decelerating => (scan.v_max_mm_s, -w),
    };
    debug_assert!((nominal_channel(scan, intercept)).abs() < 1e-9);
    let mut fit = None;
    // Second pass rematches with the fitted line.
    for _ in 0..2 {
        let matches = match_peaks(peaks, refs, intercept, slope, cfg)?;
        let pure = matches.iter().filter(|m| !m.blended).count();
        let use_blended = cfg.include_blended || pure < cfg.min_references;
        let used: Vec<&ReferenceMatch> = matches.iter().filter(|m| use_blended || !m.blended).collect();
        if used.len() < cfg.min_references {
            return Err(Error::InvalidInput(format!(
                "only {} reference lines matched, need {}",
                used.len(),
                cfg.min_references
            )));
        }
        let line = weighted_line(&used, slope)?;
        intercept = line.0;
        slope = line.1;
        fit = Some((matches, use_blended, line));
    }
    let (mut matches, use_blended, mut line) = fit.unwrap();
    for m in matches.iter_mut() {
        m.used = use_blended || !m.blended;
    }
    // Drop the worst outlier while one remains and enough references are left.
    loop {
        let (a, b) = (line.0, line.1);
        for m in matches.iter_mut() {
            m.residual_mm_s = m.reference_velocity_mm_s - (a + b * m.channel);
        }
        let worst = matches
            .iter()
            .enumerate()
            .filter(|(_, m)| m.used)
            .map(|(i, m)| (i, (m.residual_mm_s / (b * m.channel_sigma)).abs()))
            .max_by(|x, y| x.1.total_cmp(&y.1));
        let n_used = matches.iter().filter(|m| m.used).count();
        match worst {
            Some((i, pull)) if pull > cfg.outlier_pull && n_used > cfg.min_references => {
                matches[i].used = false;
                matches[i].outlier = true;
                let used: Vec<&ReferenceMatch> = matches.iter().filter(|m| m.used).collect();
                line = weighted_line(&used, b)?;
            }
            _ => break,
        }
    }
    let (a, b, mut cov, chi2_red) = line;
    // Scatter beyond the position errors inflates the line errors.
    cov *= chi2_red.max(1.0);
    let used: Vec<&ReferenceMatch> = matches.iter().filter(|m| m.used).collect();
    let (sw, swr) = used.iter().fold((0.0, 0.0), |(sw, swr), m| {
        let w = (b * m.channel_sigma).powi(-2);
        (sw + w, swr + w * m.residual_mm_s.powi(2))
    });
    let rms = (swr / sw).sqrt();
    if rms > cfg.rms_gate_mm_s {
        return Err(Error::Gate(format!(
            "calibration residual RMS {rms:.4} mm/s exceeds {} mm/s",
            cfg.rms_gate_mm_s
        )));
    }
    let quadratic_trend = quadratic_trend(&used, b)?;
    Ok(CalibrationResult {
        direction: scan.direction,
        drive_power_w: 0.0,
        slope: b,
        intercept: a,
        slope_uncertainty: cov[(1, 1)].sqrt(),
        intercept_uncertainty: cov[(0, 0)].sqrt(),
        slope_intercept_covariance: cov[(0, 1)],
        sideband_spacing_mm_s: f64::NAN,
        matches,
        rms_mm_s: rms,
        chi2_reduced: chi2_red,
        quadratic_trend,
    })
}

fn match_peaks(
    peaks: &[PeakPosition],
    refs: &[Reference],
    intercept: f64,
    slope: f64,
    cfg: &CalibrationConfig,
) -> Result<Vec<ReferenceMatch>> {
    let mut claimed: Vec<Option<usize>> = vec![None; refs.len()];
    let mut out = Vec::new();
    for p in peaks {
        let v = intercept + slope * p.channel;
        let Some((r, dist)) = refs
            .iter()
            .enumerate()
            .map(|(r, rf)| (r, (rf.velocity_mm_s - v).abs()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
        else {
            break;
        };
        if dist > cfg.match_tolerance_mm_s {
            continue;
        }
        if let Some(other) = claimed[r] {
            return Err(Error::AmbiguousMatch(format!(
                "peaks {other} and {} are both nearest to the reference at {:.3} mm/s",
                p.index, refs[r].velocity_mm_s
            )));
        }
        claimed[r] = Some(p.index);
        out.push(ReferenceMatch {
            peak: p.index,
            channel: p.channel,
            channel_sigma: p.sigma,
            reference_velocity_mm_s: refs[r].velocity_mm_s,
            blended: refs[r].blended,
            used: false,
            outlier: false,
            residual_mm_s: f64::NAN,
        });
    }
    Ok(out)
}

/// Weighted least squares `v = a + b·ch`, channel errors projected through
/// the current slope. Returns `(a, b, covariance, χ²_ν)`.
fn weighted_line(used: &[&ReferenceMatch], slope_guess: f64) -> Result<(f64, f64, DMatrix<f64>, f64)> {
    let mut slope = slope_guess;
    let mut result = None;
    for _ in 0..3 {
        let (x, y, wts): (Vec<f64>, Vec<f64>, Vec<f64>) = used
            .iter()
            .map(|m| (m.channel, m.reference_velocity_mm_s, 1.0 / (slope * m.channel_sigma).powi(2)))
            .fold((vec![], vec![], vec![]), |mut acc, (a, b, c)| {
                acc.0.push(a);
                acc.1.push(b);
                acc.2.push(c);
                acc
            });
        let (coef, cov, chi2) = weighted_polyfit(&x, &y, &wts, 1)?;
        slope = coef[1];
        let dof = (x.len() - 2).max(1) as f64;
        result = Some((coef[0], coef[1], cov, chi2 / dof));
    }
    Ok(result.unwrap())
}

fn quadratic_trend(used: &[&ReferenceMatch], slope: f64) -> Result<TrendTest> {
    let n = used.len();
    let dof = n.saturating_sub(3);
    if dof == 0 {
        return Ok(TrendTest { coefficient: 0.0, sigma: f64::INFINITY, t: 0.0, dof, p_value: 1.0 });
    }
    // Centered, scaled channel for conditioning.
    let mean = used.iter().map(|m| m.channel).sum::<f64>() / n as f64;
    let half = used.iter().map(|m| (m.channel - mean).abs()).fold(0.0, f64::max).max(1.0);
    let x: Vec<f64> = used.iter().map(|m| (m.channel - mean) / half).collect();
    let y: Vec<f64> = used.iter().map(|m| m.reference_velocity_mm_s).collect();
    let w: Vec<f64> = used.iter().map(|m| 1.0 / (slope * m.channel_sigma).powi(2)).collect();
    let (coef, cov, chi2) = weighted_polyfit(&x, &y, &w, 2)?;
    let scale = (chi2 / dof as f64).sqrt();
    let sigma = cov[(2, 2)].sqrt() * scale;
    let t = if sigma > 0.0 { coef[2] / sigma } else { 0.0 };
    let dist = StudentsT::new(0.0, 1.0, dof as f64).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let p_value = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(TrendTest { coefficient: coef[2], sigma, t, dof, p_value })
}

/// Weighted polynomial least squares. Returns coefficients, their
/// covariance and χ².
pub fn weighted_polyfit(x: &[f64], y: &[f64], w: &[f64], degree: usize) -> Result<(Vec<f64>, DMatrix<f64>, f64)> {
    let n = x.len();
    let k = degree + 1;
    if n < k {
        return Err(Error::InvalidInput(format!("{n} points cannot determine a degree-{degree} polynomial")));
    }
    if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::InvalidInput("regression weights must be positive".into()));
    }
    let mut a = DMatrix::zeros(n, k);
    let mut b = DVector::zeros(n);
    for i in 0..n {
        let s = w[i].sqrt();
        let mut p = 1.0;
        for j in 0..k {
            a[(i, j)] = p * s;
            p *= x[i];
        }
        b[i] = y[i] * s;
    }
    let ata = a.tr_mul(&a);
    let cov = ata.try_inverse().ok_or_else(|| Error::Singular("calibration normal equations".into()))?;
    let coef = &cov * a.tr_mul(&b);
    let chi2 = (&a * &coef - &b).norm_squared();
    Ok((coef.iter().copied().collect(), cov, chi2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftTest {
    pub relative_change: f64,
    pub z: f64,
    pub detected: bool,
}

/// Compares two calibrations' slope magnitudes; a drift is reported above `z_threshold`.
pub fn slope_drift(a: &CalibrationResult, b: &CalibrationResult, z_threshold: f64) -> DriftTest {
    let z = (b.slope.abs() - a.slope.abs()) / (a.slope_uncertainty.powi(2) + b.slope_uncertainty.powi(2)).sqrt();
    DriftTest { relative_change: b.slope / a.slope - 1.0, z, detected: z.abs() > z_threshold }
}
