//! Physical constants, Doppler/energy/frequency conversions and the α-Fe
//! hyperfine sextet.
//!
//! Angular frequency (rad/s) is the canonical internal unit. Velocities are
//! in mm/s and energies in neV at the public boundaries.
//!
//! The photon wavenumber `k0` is derived from the γ energy
//! (`k0 = 2π E / (h c)`, ≈ 7.30e10 1/m for the 14.4 keV line). Some published
//! tables quote 7.3e9 1/m, which is inconsistent with the 14.4 keV line by a
//! factor of ten; use [`PhysConstants::with_k0_override`] to reproduce such a
//! number on purpose.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of light in vacuum (m/s), exact.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Planck constant (eV·s), CODATA 2018 exact value.
pub const PLANCK_H_EV_S: f64 = 4.135_667_696e-15;
/// Energy of the ⁵⁷Fe Mössbauer transition (eV).
pub const FE57_GAMMA_ENERGY_EV: f64 = 14_412.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysConstants {
    pub gamma_energy_ev: f64,
    /// Photon wavenumber (1/m).
    pub k0_per_m: f64,
    pub speed_of_light_m_s: f64,
    pub planck_h_ev_s: f64,
}

impl PhysConstants {
    pub fn new(gamma_energy_ev: f64) -> Self {
        let k0 = 2.0 * PI * gamma_energy_ev / (PLANCK_H_EV_S * SPEED_OF_LIGHT);
        Self {
            gamma_energy_ev,
            k0_per_m: k0,
            speed_of_light_m_s: SPEED_OF_LIGHT,
            planck_h_ev_s: PLANCK_H_EV_S,
        }
    }

    /// Replaces the derived wavenumber. The γ energy is left untouched, so
    /// the `k0 = 2πE/(hc)` identity no longer holds afterwards.
    pub fn with_k0_override(mut self, k0_per_m: f64) -> Self {
        self.k0_per_m = k0_per_m;
        self
    }

    /// `k0` implied by the stored energy and constants.
    pub fn derived_k0(&self) -> f64 {
        2.0 * PI * self.gamma_energy_ev / (self.planck_h_ev_s * self.speed_of_light_m_s)
    }
}

impl Default for PhysConstants {
    fn default() -> Self {
        Self::new(FE57_GAMMA_ENERGY_EV)
    }
}

/// Doppler detuning `Δω = k0·v` for a source velocity in mm/s.
/// Positive velocity means the source approaches (blue shift).
pub fn velocity_to_angular_frequency(v_mm_s: f64, c: &PhysConstants) -> f64 {
    c.k0_per_m * v_mm_s * 1e-3
}

pub fn angular_frequency_to_velocity(omega: f64, c: &PhysConstants) -> f64 {
    omega / c.k0_per_m * 1e3
}

/// Energy shift `E_γ·v/c` in neV.
pub fn velocity_to_energy(v_mm_s: f64, c: &PhysConstants) -> f64 {
    c.gamma_energy_ev * (v_mm_s * 1e-3) / c.speed_of_light_m_s * 1e9
}

pub fn energy_to_velocity(e_nev: f64, c: &PhysConstants) -> f64 {
    e_nev * 1e-9 * c.speed_of_light_m_s / c.gamma_energy_ev * 1e3
}

/// `e / h` in MHz for an energy in neV.
pub fn energy_to_frequency(e_nev: f64) -> f64 {
    e_nev * 1e-9 / PLANCK_H_EV_S * 1e-6
}

pub fn frequency_to_energy(f_mhz: f64) -> f64 {
    f_mhz * 1e6 * PLANCK_H_EV_S * 1e9
}

/// Doppler velocity (mm/s) whose detuning equals a frequency in Hz.
pub fn frequency_to_velocity(f_hz: f64, c: &PhysConstants) -> f64 {
    angular_frequency_to_velocity(2.0 * PI * f_hz, c)
}

/// Which mirror pair of the sextet a line belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineClass {
    /// Lines 1 and 6 (Δm = ±1, strongest).
    Outer,
    /// Lines 2 and 5.
    Middle,
    /// Lines 3 and 4 (weakest).
    Inner,
}

impl LineClass {
    /// Class of line `i` (0-based, ordered by velocity).
    pub fn of_line(i: usize) -> LineClass {
        match i {
            0 | 5 => LineClass::Outer,
            1 | 4 => LineClass::Middle,
            2 | 3 => LineClass::Inner,
            _ => panic!("sextet line index out of range: {i}"),
        }
    }

    pub const ALL: [LineClass; 3] = [LineClass::Outer, LineClass::Middle, LineClass::Inner];
}

/// Relative intensities of the outer, middle and inner line pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LineIntensities {
    pub outer: f64,
    pub middle: f64,
    pub inner: f64,
}

impl LineIntensities {
    pub fn get(&self, class: LineClass) -> f64 {
        match class {
            LineClass::Outer => self.outer,
            LineClass::Middle => self.middle,
            LineClass::Inner => self.inner,
        }
    }
}

impl Default for LineIntensities {
    fn default() -> Self {
        Self { outer: 3.0, middle: 2.0, inner: 1.0 }
    }
}

/// The six magnetic-dipole lines of the absorber, as Doppler velocities
/// relative to the source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperfineScheme {
    pub line_velocities_mm_s: [f64; 6],
    pub intensities: LineIntensities,
    /// Informational; the reference velocities already include it.
    pub isomer_shift_nev: f64,
}

/// Tolerance on mirror symmetry of the sextet about its centroid (mm/s).
pub const SCHEME_SYMMETRY_TOLERANCE_MM_S: f64 = 0.06;

impl HyperfineScheme {
    pub fn validate(&self) -> Result<()> {
        let v = &self.line_velocities_mm_s;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("line velocities must be finite".into()));
        }
        if v.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("line velocities must be strictly increasing".into()));
        }
        let LineIntensities { outer, middle, inner } = self.intensities;
        if !(outer > 0.0 && middle > 0.0 && inner > 0.0) {
            return Err(Error::Config("line intensities must be strictly positive".into()));
        }
        let asym = self.mirror_asymmetry();
        if asym > SCHEME_SYMMETRY_TOLERANCE_MM_S {
            return Err(Error::Config(format!(
                "sextet is not mirror symmetric: max deviation {asym:.3} mm/s"
            )));
        }
        Ok(())
    }

    pub fn centroid(&self) -> f64 {
        self.line_velocities_mm_s.iter().sum::<f64>() / 6.0
    }

    /// Largest deviation of a line from the mirror image of its partner.
    pub fn mirror_asymmetry(&self) -> f64 {
        let c = self.centroid();
        let v = &self.line_velocities_mm_s;
        (0..3)
            .map(|i| ((v[i] - c) + (v[5 - i] - c)).abs())
            .fold(0.0, f64::max)
    }

    pub fn line_intensity(&self, i: usize) -> f64 {
        self.intensities.get(LineClass::of_line(i))
    }

    pub fn class_of(&self, i: usize) -> LineClass {
        LineClass::of_line(i)
    }

    /// Scheme reflected about its centroid (line order re-sorted).
    pub fn mirrored(&self) -> Self {
        let c = self.centroid();
        let v = &self.line_velocities_mm_s;
        let mut out = [0.0; 6];
        for i in 0..6 {
            out[i] = 2.0 * c - v[5 - i];
        }
        Self { line_velocities_mm_s: out, ..self.clone() }
    }
}

impl Default for HyperfineScheme {
    fn default() -> Self {
        default_alpha_fe_scheme()
    }
}

/// α-Fe sextet against a ⁵⁷Co(Rh) source with 3:2:1 intensities.
pub fn default_alpha_fe_scheme() -> HyperfineScheme {
    HyperfineScheme {
        line_velocities_mm_s: [-5.42, -3.19, -0.95, 0.72, 2.96, 5.19],
        intensities: LineIntensities::default(),
        isomer_shift_nev: -5.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    #[default]
    ConstantAcceleration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    Accelerating,
    Decelerating,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Accelerating, Direction::Decelerating];

    pub fn label(self) -> &'static str {
        match self {
            Direction::Accelerating => "acc",
            Direction::Decelerating => "dec",
        }
    }
}

/// Velocity sweep of one half-spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanParams {
    pub v_min_mm_s: f64,
    pub v_max_mm_s: f64,
    /// Channels per half-spectrum.
    pub n_channels: usize,
    pub scan_mode: ScanMode,
    pub direction: Direction,
}

impl ScanParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_min_mm_s.is_finite() && self.v_max_mm_s.is_finite()) {
            return Err(Error::Config("scan velocities must be finite".into()));
        }
        if self.v_min_mm_s >= self.v_max_mm_s {
            return Err(Error::Config("scan requires v_min < v_max".into()));
        }
        if self.n_channels < 2 {
            return Err(Error::Config("scan requires at least 2 channels".into()));
        }
        Ok(())
    }

    /// Velocity step between adjacent channels (mm/s, positive).
    pub fn channel_width(&self) -> f64 {
        (self.v_max_mm_s - self.v_min_mm_s) / (self.n_channels - 1) as f64
    }

    pub fn with_direction(mut self, direction: Direction) -> Self {
        self.direction = direction;
        self
    }
}

impl Default for ScanParams {
    fn default() -> Self {
        Self {
            v_min_mm_s: -19.0,
            v_max_mm_s: 19.0,
            n_channels: 2048,
            scan_mode: ScanMode::ConstantAcceleration,
            direction: Direction::Accelerating,
        }
    }
}
