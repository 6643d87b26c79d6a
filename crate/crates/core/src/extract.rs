//! Sideband powers from peak areas.
//!
//! Each peak of the normalized spectrum is integrated over a window of
//! `±Γ` on the calibrated velocity axis, mirror partners are averaged into
//! nine rows, and the overlap matrix maps `(P₀, P₁, P₂)` to those rows.
//!
//! The window keeps `(2/π)·arctan 2 ≈ 0.705` of a Lorentzian's area. That
//! factor is common to every row and is left in the powers; the global fit
//! absorbs it in its normalization.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::calib::CalibrationResult;
use crate::error::{Error, Result};
use crate::physics::LineClass;
use crate::specfit::{Composition, FitModel, NormalizedSpectrum, SpectrumFit};

pub type OverlapMatrix = SMatrix<f64, 9, 3>;

/// Row contents of the y-vector, outward from the centroid.
pub const ROW_COMPOSITIONS: [&[(LineClass, u32)]; 9] = [
    &[(LineClass::Inner, 0)],
    &[(LineClass::Middle, 0), (LineClass::Outer, 1)],
    &[(LineClass::Outer, 0), (LineClass::Middle, 1)],
    &[(LineClass::Inner, 1)],
    &[(LineClass::Inner, 1)],
    &[(LineClass::Middle, 1), (LineClass::Outer, 2)],
    &[(LineClass::Outer, 1), (LineClass::Middle, 2)],
    &[(LineClass::Inner, 2)],
    &[(LineClass::Inner, 2)],
];

/// Fraction of a unit-area Lorentzian of full width `fwhm` inside
/// `±half_window` of its center.
pub fn lorentzian_window_fraction(half_window: f64, fwhm: f64) -> f64 {
    2.0 / PI * (2.0 * half_window / fwhm).atan()
}

pub fn build_overlap_matrix(a: f64, b: f64, c: f64) -> Result<OverlapMatrix> {
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ![a, b, c].iter().all(|v| v.is_finite()) {
        return Err(Error::Domain(format!("line intensities must be positive, got ({a}, {b}, {c})")));
    }
    Ok(overlap_pattern(a, b, c))
}

/// The pattern without the positivity check.
pub fn overlap_pattern(a: f64, b: f64, c: f64) -> OverlapMatrix {
    #[rustfmt::skip]
    let m = OverlapMatrix::from_row_slice(&[
        a, 0.0, 0.0,
        b, c, 0.0,
        c, b, 0.0,
        0.0, a, 0.0,
        0.0, a, 0.0,
        0.0, b, c,
        0.0, c, b,
        0.0, 0.0, a,
        0.0, 0.0, a,
    ]);
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidebandPowers {
    pub drive_power_w: f64,
    pub p: [f64; 3],
    pub covariance: [[f64; 3]; 3],
}

impl SidebandPowers {
    pub fn sigma(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.covariance[i][i].sqrt())
    }

    pub fn total(&self) -> f64 {
        self.p.iter().sum()
    }
}

fn checked_normal_inverse(ata: Matrix3<f64>) -> Result<Matrix3<f64>> {
    let svd = ata.svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-12 * smax) {
        return Err(Error::Singular(format!("overlap matrix is rank deficient (σ_min/σ_max = {:.3e})", smin / smax)));
    }
    ata.try_inverse().ok_or_else(|| Error::Singular("overlap matrix normal equations".into()))
}

fn to_array(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = 0.5 * (m[(i, j)] + m[(j, i)]);
        }
    }
    out
}

/// `x = M·y` with `M = (AᵀA)⁻¹Aᵀ` and `Σ_p = M·diag(σ_y²)·Mᵀ`.
pub fn invert_for_powers(y: &[f64; 9], sigma_y: &[f64; 9], a: &OverlapMatrix) -> Result<SidebandPowers> {
    check_rows(y, sigma_y)?;
    let m = checked_normal_inverse(a.transpose() * a)? * a.transpose();
    let yv = SMatrix::<f64, 9, 1>::from_column_slice(y);
    let x: Vector3<f64> = m * yv;
    let sy = SMatrix::<f64, 9, 9>::from_diagonal(&SMatrix::<f64, 9, 1>::from_iterator(sigma_y.iter().map(|s| s * s)));
    let cov = m * sy * m.transpose();
    Ok(SidebandPowers { drive_power_w: 0.0, p: [x[0], x[1], x[2]], covariance: to_array(&cov) })
}

/// Inverse-variance weighted variant, `M = (AᵀWA)⁻¹AᵀW`.
pub fn invert_for_powers_weighted(y: &[f64; 9], sigma_y: &[f64; 9], a: &OverlapMatrix) -> Result<SidebandPowers> {
    check_rows(y, sigma_y)?;
    if sigma_y.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidInput("weighted inversion needs positive σ_y".into()));
    }
    let w = SMatrix::<f64, 9, 9>::from_diagonal(&SMatrix::<f64, 9, 1>::from_iterator(sigma_y.iter().map(|s| 1.0 / (s * s))));
    let cov = checked_normal_inverse(a.transpose() * w * a)?;
    let x: Vector3<f64> = cov * a.transpose() * w * SMatrix::<f64, 9, 1>::from_column_slice(y);
    Ok(SidebandPowers { drive_power_w: 0.0, p: [x[0], x[1], x[2]], covariance: to_array(&cov) })
}

fn check_rows(y: &[f64; 9], sigma_y: &[f64; 9]) -> Result<()> {
    if y.iter().chain(sigma_y).any(|v| !v.is_finite()) || sigma_y.iter().any(|s| *s < 0.0) {
        return Err(Error::InvalidInput("y and σ_y must be finite with σ_y ≥ 0".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractConfig {
    /// Window half-width in linewidths.
    pub window_half_width: f64,
    /// Resolution gate on the calibrated axis.
    pub min_channels_per_linewidth: f64,
    pub weighted: bool,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self { window_half_width: 1.0, min_channels_per_linewidth: 8.0, weighted: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakIntegral {
    pub velocity_mm_s: f64,
    pub composition: Vec<Composition>,
    /// Center taken from a fitted position rather than the template.
    pub fitted: bool,
    pub window_mm_s: [f64; 2],
    /// Window clipped at the midpoint to a neighbour.
    pub truncated: bool,
    pub area: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakIntegrals {
    pub peaks: Vec<PeakIntegral>,
    pub y: [f64; 9],
    pub sigma_y: [f64; 9],
    /// Indices into `peaks` as `(left, right)` for each row.
    pub rows: Vec<(usize, usize)>,
}

/// Trapezoid weights for `∫ f dv` over `[lo, hi]` with linear interpolation
/// between samples. `v` must be strictly monotonic.
pub fn trapezoid_weights(v: &[f64], lo: f64, hi: f64) -> Vec<(usize, f64)> {
    let n = v.len();
    let mut idx: Vec<usize> = (0..n).collect();
    if n > 1 && v[0] > v[n - 1] {
        idx.reverse();
    }
    let mut out: Vec<(usize, f64)> = Vec::new();
    let mut add = |i: usize, w: f64| match out.last_mut() {
        Some(last) if last.0 == i => last.1 += w,
        _ => out.push((i, w)),
    };
    for pair in idx.windows(2) {
        let (i, j) = (pair[0], pair[1]);
        let (v0, v1) = (v[i], v[j]);
        let s = lo.max(v0);
        let e = hi.min(v1);
        if e <= s {
            continue;
        }
        let h = v1 - v0;
        let tm = 0.5 * ((s - v0) + (e - v0)) / h;
        add(i, (e - s) * (1.0 - tm));
        add(j, (e - s) * tm);
    }
    out.sort_by_key(|p| p.0);
    out
}

/// Areas of `1 − normalized` around every template peak, averaged into the
/// nine mirror rows.
///
/// Centers come from the fitted peak with the nearest template velocity
/// (within half a linewidth) mapped through the calibration; template
/// peaks absent from the fit fall back to their template velocity.
pub fn integrate_peaks(
    normalized: &NormalizedSpectrum,
    fit: &SpectrumFit,
    calibration: &CalibrationResult,
    template: &FitModel,
    linewidth_mm_s: f64,
    cfg: &ExtractConfig,
) -> Result<PeakIntegrals> {
    let n = normalized.values.len();
    if n < 2 || normalized.sigma.len() != n || normalized.channels.len() != n {
        return Err(Error::InvalidInput("normalized spectrum arrays are inconsistent".into()));
    }
    if !(linewidth_mm_s > 0.0) || !(cfg.window_half_width > 0.0) {
        return Err(Error::Config("linewidth and window half-width must be positive".into()));
    }
    let per_gamma = linewidth_mm_s / calibration.slope.abs();
    if per_gamma < cfg.min_channels_per_linewidth {
        return Err(Error::Gate(format!(
            "{per_gamma:.1} channels per linewidth, need {}",
            cfg.min_channels_per_linewidth
        )));
    }
    let v: Vec<f64> = normalized.channels.iter().map(|&ch| calibration.velocity(ch as f64)).collect();
    let v_lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let v_hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let mut centers: Vec<(f64, Vec<Composition>, bool)> = template
        .peaks
        .iter()
        .map(|tp| {
            let hit = fit
                .peaks
                .iter()
                .map(|fp| (fp, (fp.template_velocity_mm_s - tp.velocity_mm_s).abs()))
                .filter(|(_, d)| *d <= 0.5 * linewidth_mm_s)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            match hit {
                Some((fp, _)) => (calibration.velocity(fp.position), tp.composition(), true),
                None => (tp.velocity_mm_s, tp.composition(), false),
            }
        })
        .collect();
    centers.sort_by(|a, b| a.0.total_cmp(&b.0));

    let half = cfg.window_half_width * linewidth_mm_s;
    let mut peaks = Vec::with_capacity(centers.len());
    for (k, (c, composition, fitted)) in centers.iter().enumerate() {
        let mut lo = c - half;
        let mut hi = c + half;
        let mut truncated = false;
        if k > 0 {
            let mid = 0.5 * (centers[k - 1].0 + c);
            if mid > lo {
                lo = mid;
                truncated = true;
            }
        }
        if k + 1 < centers.len() {
            let mid = 0.5 * (centers[k + 1].0 + c);
            if mid < hi {
                hi = mid;
                truncated = true;
            }
        }
        if lo < v_lo || hi > v_hi {
            return Err(Error::InvalidInput(format!("integration window around {c:.3} mm/s leaves the scan")));
        }
        let weights = trapezoid_weights(&v, lo, hi);
        let area = weights.iter().map(|&(i, w)| w * (1.0 - normalized.values[i])).sum();
        let var: f64 = weights.iter().map(|&(i, w)| (w * normalized.sigma[i]).powi(2)).sum();
        peaks.push(PeakIntegral {
            velocity_mm_s: *c,
            composition: composition.clone(),
            fitted: *fitted,
            window_mm_s: [lo, hi],
            truncated,
            area,
            sigma: var.sqrt(),
        });
    }

    let rows = mirror_rows(&peaks, template.centroid_mm_s)?;
    let mut y = [0.0; 9];
    let mut sigma_y = [0.0; 9];
    for (r, &(l, rt)) in rows.iter().enumerate() {
        y[r] = 0.5 * (peaks[l].area + peaks[rt].area);
        sigma_y[r] = 0.5 * peaks[l].sigma.hypot(peaks[rt].sigma);
    }
    Ok(PeakIntegrals { peaks, y, sigma_y, rows })
}

/// Pairs peaks at equal rank outward from the centroid and checks each
/// pair against the expected row contents.
fn mirror_rows(peaks: &[PeakIntegral], centroid: f64) -> Result<Vec<(usize, usize)>> {
    let mut left: Vec<usize> = (0..peaks.len()).filter(|&k| peaks[k].velocity_mm_s < centroid).collect();
    let mut right: Vec<usize> = (0..peaks.len()).filter(|&k| peaks[k].velocity_mm_s >= centroid).collect();
    if left.len() != 9 || right.len() != 9 {
        return Err(Error::InvalidInput(format!(
            "expected 9 peaks on each side of the centroid, found {} and {}",
            left.len(),
            right.len()
        )));
    }
    left.sort_by(|&a, &b| (centroid - peaks[a].velocity_mm_s).total_cmp(&(centroid - peaks[b].velocity_mm_s)));
    right.sort_by(|&a, &b| (peaks[a].velocity_mm_s - centroid).total_cmp(&(peaks[b].velocity_mm_s - centroid)));
    let mut rows = Vec::with_capacity(9);
    for (r, (&l, &rt)) in left.iter().zip(&right).enumerate() {
        let want: Vec<Composition> = ROW_COMPOSITIONS[r].iter().map(|&(class, order)| Composition { class, order }).collect();
        for k in [l, rt] {
            if peaks[k].composition != want {
                return Err(Error::InvalidInput(format!(
                    "peak at {:.3} mm/s does not have the contents of row {r}",
                    peaks[k].velocity_mm_s
                )));
            }
        }
        rows.push((l, rt));
    }
    Ok(rows)
}

/// Intensities `(a, b, c)` of the inner, middle and outer lines as
/// velocity-space areas from a zero-drive fit.
pub fn intensities_from_zero_drive(fit: &SpectrumFit, calibration: &CalibrationResult) -> Result<[f64; 3]> {
    let pick = |class: LineClass| -> Result<f64> {
        fit.groups
            .iter()
            .find(|g| g.composition == [Composition { class, order: 0 }])
            .map(|g| g.amplitude * calibration.slope.abs())
            .ok_or_else(|| Error::InvalidInput(format!("zero-drive fit has no pure {class:?} group")))
    };
    Ok([pick(LineClass::Inner)?, pick(LineClass::Middle)?, pick(LineClass::Outer)?])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    pub integrals: PeakIntegrals,
    pub intensities: [f64; 3],
    pub powers: SidebandPowers,
}

/// Integration and inversion for one spectrum.
pub fn extract_powers(
    normalized: &NormalizedSpectrum,
    fit: &SpectrumFit,
    calibration: &CalibrationResult,
    template: &FitModel,
    intensities: [f64; 3],
    cfg: &ExtractConfig,
) -> Result<Extraction> {
    let integrals = integrate_peaks(normalized, fit, calibration, template, template.linewidth_mm_s, cfg)?;
    let a = build_overlap_matrix(intensities[0], intensities[1], intensities[2])?;
    let mut powers = if cfg.weighted {
        invert_for_powers_weighted(&integrals.y, &integrals.sigma_y, &a)?
    } else {
        invert_for_powers(&integrals.y, &integrals.sigma_y, &a)?
    };
    powers.drive_power_w = normalized.drive_power_w;
    Ok(Extraction { integrals, intensities, powers })
}

/// Combines per-direction results of one drive power by inverse-covariance
/// weighting.
pub fn combine_powers(parts: &[SidebandPowers]) -> Result<SidebandPowers> {
    let first = parts.first().ok_or_else(|| Error::InvalidInput("nothing to combine".into()))?;
    let mut info = DMatrix::<f64>::zeros(3, 3);
    let mut rhs = DVector::<f64>::zeros(3);
    for p in parts {
        let cov = DMatrix::from_fn(3, 3, |i, j| p.covariance[i][j]);
        let inv = cov.try_inverse().ok_or_else(|| Error::Singular("sideband power covariance".into()))?;
        rhs += &inv * DVector::from_column_slice(&p.p);
        info += inv;
    }
    let cov = info.try_inverse().ok_or_else(|| Error::Singular("combined information matrix".into()))?;
    let x = &cov * rhs;
    let c3 = Matrix3::from_fn(|i, j| cov[(i, j)]);
    Ok(SidebandPowers { drive_power_w: first.drive_power_w, p: [x[0], x[1], x[2]], covariance: to_array(&c3) })
}
