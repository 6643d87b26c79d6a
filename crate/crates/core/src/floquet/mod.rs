//! Forward model of the phase-modulated absorption spectrum.
//!
//! A nucleus displaced by `A cos(Ω_saw t)` along the beam sees its resonance
//! split into sidebands at `Ω_i + nΩ_saw` with weights `J_n²(k0 A)`. A partial
//! standing wave makes the local amplitude `A0·f(x)` vary along the film; the
//! observed weights are then the amplitude-averaged `P_n(m0)`.

mod bessel;
pub mod quadrature;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

pub use bessel::{bessel_j, bessel_j_orders, derivative_from_orders, MAX_ARGUMENT, MAX_ORDER};

use crate::error::{Error, Result};
use crate::physics::{self, HyperfineScheme, PhysConstants};

/// Required captured weight `Σ_{|n|≤n_max} P_n`.
pub const TRUNCATION_TOLERANCE: f64 = 1e-6;

/// Local amplitude factor `f(x) = sqrt(1 + α² + 2α cos(2 k_saw x))`.
pub fn standing_wave_envelope(x_m: f64, alpha: f64, k_saw: f64) -> f64 {
    (1.0 + alpha * alpha + 2.0 * alpha * (2.0 * k_saw * x_m).cos()).sqrt()
}

/// Density of the normalized local amplitude `y` over one standing-wave
/// period. Supported on the open interval `(1 - α, 1 + α)`.
pub fn amplitude_pdf(y: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("amplitude_pdf requires 0 < alpha < 1, got {alpha}")));
    }
    if !(y > 1.0 - alpha && y < 1.0 + alpha) {
        return Err(Error::Domain(format!(
            "amplitude_pdf: y = {y} outside open support ({}, {})",
            1.0 - alpha,
            1.0 + alpha
        )));
    }
    let u = y * y - 1.0 - alpha * alpha;
    let disc = 4.0 * alpha * alpha - u * u;
    if disc <= 0.0 {
        return Err(Error::Domain(format!("amplitude_pdf: y = {y} at the support edge")));
    }
    Ok(2.0 * y / (PI * disc.sqrt()))
}

fn check_modulation(m0: f64, alpha: f64, n_max: usize) -> Result<()> {
    if !(m0 >= 0.0 && m0.is_finite()) {
        return Err(Error::Domain(format!("modulation index must be >= 0, got {m0}")));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Domain(format!("reflection alpha must be in [0, 1), got {alpha}")));
    }
    if m0 * (1.0 + alpha) > MAX_ARGUMENT {
        return Err(Error::Domain(format!("modulation index {m0} too large")));
    }
    if n_max + 1 > MAX_ORDER {
        return Err(Error::Domain(format!("sideband order {n_max} too large")));
    }
    Ok(())
}

/// `P_n(m0, α)` for `n = 0 ..= n_max`. `P_{-n} = P_n`.
///
/// With `α > 0` the amplitude average is computed in the angle variable
/// `y² = 1 + α² + 2α cos θ`, where it becomes `(1/π) ∫_0^π J_n²(m0·y(θ)) dθ`
/// with a smooth integrand.
pub fn sideband_powers(n_max: usize, m0: f64, alpha: f64) -> Result<Vec<f64>> {
    check_modulation(m0, alpha, n_max)?;
    if alpha == 0.0 || m0 == 0.0 {
        let j = bessel_j_orders(n_max, m0)?;
        return Ok(j.iter().map(|v| v * v).collect());
    }
    let (vals, _) = quadrature::integrate_vec(n_max + 1, 0.0, PI, |theta, out| {
        let y = (1.0 + alpha * alpha + 2.0 * alpha * theta.cos()).sqrt();
        bessel::bessel_j_orders_into(m0 * y, out);
        out.iter_mut().for_each(|j| *j = *j * *j / PI);
    })?;
    Ok(vals)
}

pub fn sideband_power(n: i32, m0: f64, alpha: f64) -> Result<f64> {
    let k = n.unsigned_abs() as usize;
    Ok(sideband_powers(k, m0, alpha)?[k])
}

/// Sideband powers with partial derivatives in `m0` and `α`.
#[derive(Debug, Clone, PartialEq)]
pub struct SidebandPowerJet {
    pub value: Vec<f64>,
    pub d_m0: Vec<f64>,
    pub d_alpha: Vec<f64>,
}

pub fn sideband_power_jet(n_max: usize, m0: f64, alpha: f64) -> Result<SidebandPowerJet> {
    check_modulation(m0, alpha, n_max + 1)?;
    let dim = n_max + 1;
    let (vals, _) = quadrature::integrate_vec(3 * dim, 0.0, PI, |theta, out| {
        let c = theta.cos();
        let y = (1.0 + alpha * alpha + 2.0 * alpha * c).sqrt();
        let dy_dalpha = (alpha + c) / y;
        let mut j = vec![0.0; n_max + 2];
        bessel::bessel_j_orders_into(m0 * y, &mut j);
        for n in 0..dim {
            let jp = derivative_from_orders(&j, n);
            out[n] = j[n] * j[n] / PI;
            out[dim + n] = 2.0 * j[n] * jp * y / PI;
            out[2 * dim + n] = 2.0 * j[n] * jp * m0 * dy_dalpha / PI;
        }
    })?;
    Ok(SidebandPowerJet {
        value: vals[..dim].to_vec(),
        d_m0: vals[dim..2 * dim].to_vec(),
        d_alpha: vals[2 * dim..].to_vec(),
    })
}

/// Order cut-off `ceil(m0·(1+α)) + 8`.
pub fn default_max_order(m0: f64, alpha: f64) -> usize {
    (m0 * (1.0 + alpha)).ceil() as usize + 8
}

/// Sideband weights for orders `-n_max ..= n_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidebandWeights {
    pub orders: Vec<i32>,
    pub weights: Vec<f64>,
}

impl SidebandWeights {
    pub fn compute(m0: f64, alpha: f64, n_max: usize) -> Result<Self> {
        let p = sideband_powers(n_max, m0, alpha)?;
        let n = n_max as i32;
        let orders: Vec<i32> = (-n..=n).collect();
        let weights = orders.iter().map(|o| p[o.unsigned_abs() as usize]).collect();
        Ok(Self { orders, weights })
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn weight(&self, order: i32) -> f64 {
        let n = (self.orders.len() / 2) as i32;
        if order.abs() > n {
            0.0
        } else {
            self.weights[(order + n) as usize]
        }
    }
}

/// Drive and line-shape parameters of the modulated absorber.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulationModel {
    /// `k0·A0`, dimensionless.
    pub mod_index: f64,
    /// Coherent reflection coefficient, `[0, 1)`.
    pub alpha: f64,
    /// SAW angular frequency (rad/s).
    pub saw_angular_freq: f64,
    /// Transmission linewidth, FWHM (rad/s).
    pub linewidth: f64,
    pub scheme: HyperfineScheme,
    pub max_sideband_order: usize,
}

impl ModulationModel {
    pub fn new(mod_index: f64, alpha: f64, saw_angular_freq: f64, linewidth: f64, scheme: HyperfineScheme) -> Self {
        let max_sideband_order = default_max_order(mod_index, alpha);
        Self { mod_index, alpha, saw_angular_freq, linewidth, scheme, max_sideband_order }
    }

    pub fn with_mod_index(&self, mod_index: f64) -> Self {
        let mut out = self.clone();
        out.mod_index = mod_index;
        out.max_sideband_order = out.max_sideband_order.max(default_max_order(mod_index, self.alpha));
        out
    }

    pub fn validate(&self) -> Result<()> {
        check_modulation(self.mod_index, self.alpha, self.max_sideband_order)?;
        if !(self.linewidth > 0.0 && self.linewidth.is_finite()) {
            return Err(Error::Domain("linewidth must be > 0".into()));
        }
        if !(self.saw_angular_freq >= 0.0 && self.saw_angular_freq.is_finite()) {
            return Err(Error::Domain("SAW frequency must be >= 0".into()));
        }
        self.scheme.validate()?;
        let w = self.sideband_weights()?;
        if w.total() < 1.0 - TRUNCATION_TOLERANCE {
            return Err(Error::Domain(format!(
                "max_sideband_order {} truncates {:e} of the sideband weight",
                self.max_sideband_order,
                1.0 - w.total()
            )));
        }
        Ok(())
    }

    pub fn sideband_weights(&self) -> Result<SidebandWeights> {
        SidebandWeights::compute(self.mod_index, self.alpha, self.max_sideband_order)
    }

    /// Sideband spacing expressed as a Doppler velocity (mm/s).
    pub fn sideband_spacing_mm_s(&self, c: &PhysConstants) -> f64 {
        physics::angular_frequency_to_velocity(self.saw_angular_freq, c)
    }

    pub fn linewidth_mm_s(&self, c: &PhysConstants) -> f64 {
        physics::angular_frequency_to_velocity(self.linewidth, c)
    }
}

/// One Lorentzian term of the spectrum: hyperfine line `line` shifted by
/// `order` sidebands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralComponent {
    pub line: usize,
    pub order: i32,
    pub velocity_mm_s: f64,
    /// `s_i · P_n`.
    pub weight: f64,
}

/// All components with `|n| ≤ max_sideband_order`.
pub fn spectral_components(model: &ModulationModel, c: &PhysConstants) -> Result<Vec<SpectralComponent>> {
    let weights = model.sideband_weights()?;
    let spacing = model.sideband_spacing_mm_s(c);
    let mut out = Vec::with_capacity(6 * weights.orders.len());
    for (i, v) in model.scheme.line_velocities_mm_s.iter().enumerate() {
        let s = model.scheme.line_intensity(i);
        for (&n, &p) in weights.orders.iter().zip(&weights.weights) {
            out.push(SpectralComponent {
                line: i,
                order: n,
                velocity_mm_s: v + n as f64 * spacing,
                weight: s * p,
            });
        }
    }
    Ok(out)
}

/// Absorption `S(Ω) = Σ_i Σ_n s_i P_n / ((Ω − Ω_i − nΩ_saw)² + (Γ/2)²)` on a
/// velocity grid, scaled by `(Γ/2)²` so an isolated unit-weight component
/// peaks at 1.
pub fn synthesize_spectrum(model: &ModulationModel, velocities_mm_s: &[f64], c: &PhysConstants) -> Result<Vec<f64>> {
    model.validate()?;
    let comps = spectral_components(model, c)?;
    let hw = 0.5 * model.linewidth;
    let hw2 = hw * hw;
    let centers: Vec<(f64, f64)> = comps
        .iter()
        .filter(|k| k.weight > 0.0)
        .map(|k| (physics::velocity_to_angular_frequency(k.velocity_mm_s, c), k.weight))
        .collect();
    Ok(velocities_mm_s
        .iter()
        .map(|&v| {
            let omega = physics::velocity_to_angular_frequency(v, c);
            centers
                .iter()
                .map(|&(w0, s)| {
                    let d = omega - w0;
                    s * hw2 / (d * d + hw2)
                })
                .sum()
        })
        .collect())
}

/// Number of strict local maxima (plateaus count once).
pub fn count_peaks(values: &[f64]) -> usize {
    let mut count = 0;
    let mut i = 1;
    while i + 1 < values.len() {
        if values[i] > values[i - 1] {
            let mut j = i;
            while j + 1 < values.len() && values[j + 1] == values[i] {
                j += 1;
            }
            if j + 1 < values.len() && values[j + 1] < values[i] {
                count += 1;
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::default_alpha_fe_scheme;

    fn model(m0: f64, alpha: f64) -> ModulationModel {
        let c = PhysConstants::default();
        let saw = 2.0 * PI * 97.9e6;
        let gamma = physics::velocity_to_angular_frequency(0.25, &c);
        ModulationModel::new(m0, alpha, saw, gamma, default_alpha_fe_scheme())
    }

    #[test]
    fn envelope_examples() {
        let k = 2.0 * PI / 32e-6;
        for x in [0.0, 1e-6, 7.7e-6, 1e-3] {
            assert_eq!(standing_wave_envelope(x, 0.0, k), 1.0);
        }
        assert!((standing_wave_envelope(0.0, 0.36, k) - 1.36).abs() < 1e-15);
        // 2kx = π/2
        let x = PI / 4.0 / k;
        let expected = (1.0f64 + 0.36 * 0.36).sqrt();
        assert!((standing_wave_envelope(x, 0.36, k) - expected).abs() < 1e-12);
        assert!((expected - 1.0629).abs() < 1e-4);
    }

    #[test]
    fn envelope_bounds_and_period() {
        let k = 2.0 * PI / 32e-6;
        let alpha = 0.4;
        for i in 0..1000 {
            let x = i as f64 * 1.37e-7;
            let f = standing_wave_envelope(x, alpha, k);
            assert!(f >= 1.0 - alpha - 1e-12 && f <= 1.0 + alpha + 1e-12);
            let g = standing_wave_envelope(x + PI / k, alpha, k);
            assert!((f - g).abs() < 1e-9);
        }
    }

    #[test]
    fn pdf_midpoint() {
        let a: f64 = 0.36;
        let y = (1.0 + a * a).sqrt();
        let expected = 2.0 * y / (PI * 2.0 * a);
        assert!((amplitude_pdf(y, a).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn pdf_rejects_support_edges() {
        assert!(amplitude_pdf(1.36, 0.36).is_err());
        assert!(amplitude_pdf(0.64, 0.36).is_err());
        assert!(amplitude_pdf(2.0, 0.36).is_err());
        assert!(amplitude_pdf(1.0, 0.0).is_err());
    }

    /// Integrates over the support with `y = 1 + α sin φ`, which removes
    /// the inverse-square-root edges; open midpoint rule in φ.
    fn pdf_moment(alpha: f64, power: i32) -> f64 {
        let n = 20_000;
        let h = PI / n as f64;
        let mut s = 0.0;
        for i in 0..n {
            let phi = -PI / 2.0 + (i as f64 + 0.5) * h;
            let y = 1.0 + alpha * phi.sin();
            let dy = alpha * phi.cos();
            s += amplitude_pdf(y, alpha).unwrap() * dy * y.powi(power);
        }
        s * h
    }

    #[test]
    fn pdf_is_normalized() {
        assert!((pdf_moment(0.36, 0) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn pdf_concentrates_for_small_alpha() {
        let mean = pdf_moment(1e-3, 1);
        assert!((mean - 1.0).abs() < 1e-3);
    }

    #[test]
    fn zero_modulation_powers() {
        for alpha in [0.0, 0.36] {
            let p = sideband_powers(5, 0.0, alpha).unwrap();
            assert_eq!(p[0], 1.0);
            assert!(p[1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn alpha_zero_is_bessel_squared_exactly() {
        for m0 in [0.3, 1.0, 2.4, 4.34] {
            let p = sideband_powers(4, m0, 0.0).unwrap();
            for n in 0..=4 {
                let j = bessel_j(n, m0).unwrap();
                assert!((p[n] - j * j).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn powers_are_symmetric_in_order() {
        for n in 0..4 {
            assert_eq!(sideband_power(n, 2.0, 0.36).unwrap(), sideband_power(-n, 2.0, 0.36).unwrap());
        }
    }

    #[test]
    fn jet_matches_finite_differences() {
        let (m0, alpha) = (2.17, 0.36);
        let jet = sideband_power_jet(3, m0, alpha).unwrap();
        let h = 1e-6;
        let pm = sideband_powers(3, m0 + h, alpha).unwrap();
        let mm = sideband_powers(3, m0 - h, alpha).unwrap();
        let pa = sideband_powers(3, m0, alpha + h).unwrap();
        let ma = sideband_powers(3, m0, alpha - h).unwrap();
        for n in 0..=3 {
            let fd_m = (pm[n] - mm[n]) / (2.0 * h);
            let fd_a = (pa[n] - ma[n]) / (2.0 * h);
            assert!((jet.d_m0[n] - fd_m).abs() < 1e-7, "n={n}");
            assert!((jet.d_alpha[n] - fd_a).abs() < 1e-7, "n={n}");
        }
    }

    #[test]
    fn model_validation() {
        model(2.0, 0.36).validate().unwrap();
        let mut m = model(4.0, 0.36);
        m.max_sideband_order = 2;
        assert!(m.validate().is_err());
        let mut m = model(1.0, 0.0);
        m.linewidth = 0.0;
        assert!(m.validate().is_err());
        assert!(model(1.0, 1.0).validate().is_err());
    }

    #[test]
    fn weights_properties() {
        let w = model(3.0, 0.5).sideband_weights().unwrap();
        assert!(w.weights.iter().all(|&v| v >= 0.0));
        assert!(w.total() <= 1.0 + 1e-12 && w.total() >= 1.0 - TRUNCATION_TOLERANCE);
        for n in 1..5 {
            assert_eq!(w.weight(n), w.weight(-n));
        }
    }

    #[test]
    fn peak_counter() {
        assert_eq!(count_peaks(&[0.0, 1.0, 0.0, 2.0, 2.0, 1.0, 3.0]), 2);
        assert_eq!(count_peaks(&[1.0, 1.0, 1.0]), 0);
    }
}
