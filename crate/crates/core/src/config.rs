//! Run configuration. Every section and field is optional; omitted values
//! take the defaults below, unknown keys are rejected.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calib::CalibrationConfig;
use crate::error::{Error, Result};
use crate::extract::ExtractConfig;
use crate::floquet::ModulationModel;
use crate::globalfit::GlobalFitConfig;
use crate::idt::{IdtDesign, IdtFitOptions};
use crate::io::read_json;
use crate::physics::{self, Direction, HyperfineScheme, PhysConstants, ScanParams, FE57_GAMMA_ENERGY_EV};
use crate::specfit::FitOptions;
use crate::specgen::{Baseline, BudgetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsConfig {
    pub gamma_energy_ev: f64,
    /// Replaces the wavenumber derived from the γ energy.
    pub k0_override_per_m: Option<f64>,
    /// Absorption linewidth (FWHM, mm/s).
    pub linewidth_mm_s: f64,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self { gamma_energy_ev: FE57_GAMMA_ENERGY_EV, k0_override_per_m: None, linewidth_mm_s: 0.25 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModulationConfig {
    /// Modulation index per √W of drive power.
    pub m_per_sqrt_w: f64,
    pub alpha: f64,
    pub saw_frequency_hz: f64,
}

impl Default for ModulationConfig {
    fn default() -> Self {
        Self { m_per_sqrt_w: 4.34, alpha: 0.36, saw_frequency_hz: 97.9e6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Absorption depth of the strongest zero-drive line.
    pub contrast: f64,
    pub baseline: Baseline,
    /// Modulation indices of the driven spectra; drive powers follow as
    /// `(m0/m)²`.
    pub mod_indices: Vec<f64>,
    pub directions: Vec<Direction>,
    /// True velocity is `scale·nominal + offset`; 1 and 0 leave the
    /// drive ideal.
    pub velocity_scale: f64,
    pub velocity_offset_mm_s: f64,
}

/// Eight log-spaced modulation indices from 0.3 to 5.
pub fn default_mod_indices() -> Vec<f64> {
    let (a, b) = (0.3f64.ln(), 5.0f64.ln());
    (0..8).map(|i| (a + (b - a) * i as f64 / 7.0).exp()).collect()
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            contrast: 0.03,
            baseline: Baseline::default(),
            mod_indices: default_mod_indices(),
            directions: Direction::BOTH.to_vec(),
            velocity_scale: 1.0,
            velocity_offset_mm_s: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdtConfig {
    pub design: IdtDesign,
    /// Starting point of the trace fit; the design itself when absent.
    pub initial: Option<IdtDesign>,
    pub sweep_half_span_hz: f64,
    pub sweep_points: usize,
    pub relative_noise: f64,
    /// Measured traces for `idt-fit`; the synthesized ones when absent.
    /// Relative paths in a config file resolve against its directory.
    pub traces: Option<PathBuf>,
    pub fit: IdtFitOptions,
}

impl Default for IdtConfig {
    fn default() -> Self {
        let design = IdtDesign::reference_device();
        Self {
            initial: Some(IdtDesign {
                coupling_k2: design.coupling_k2 * 1.15,
                cap_per_period_f_per_m: design.cap_per_period_f_per_m * 0.9,
                shunt_r_l_ohm: 4.0,
                propagation_loss: crate::idt::db_to_amplitude(-1.5),
                ..design
            }),
            design,
            sweep_half_span_hz: 2e6,
            sweep_points: 1001,
            relative_noise: 0.01,
            traces: None,
            fit: IdtFitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub physics: PhysicsConfig,
    pub scheme: HyperfineScheme,
    pub modulation: ModulationConfig,
    pub scan: ScanParams,
    pub budget: BudgetConfig,
    pub synth: SynthConfig,
    pub fit: FitOptions,
    pub calibration: CalibrationConfig,
    pub extract: ExtractConfig,
    pub globalfit: GlobalFitConfig,
    pub idt: IdtConfig,
    /// Electro-acoustic efficiency used for the displacement constant.
    pub eta: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 20_240_917,
            physics: PhysicsConfig::default(),
            scheme: HyperfineScheme::default(),
            modulation: ModulationConfig::default(),
            scan: ScanParams::default(),
            budget: BudgetConfig { per_bin_rate_override_hz: Some(2.2), ..Default::default() },
            synth: SynthConfig::default(),
            fit: FitOptions::default(),
            calibration: CalibrationConfig::default(),
            extract: ExtractConfig::default(),
            globalfit: GlobalFitConfig::default(),
            idt: IdtConfig::default(),
            eta: 0.35,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = read_json(path).map_err(|e| match e {
            Error::Json { path, message } => Error::Config(format!("{}: {message}", path.display())),
            other => other,
        })?;
        // Relative trace paths are taken from the config's directory.
        if let (Some(t), Some(dir)) = (&cfg.idt.traces, path.parent()) {
            if t.is_relative() {
                cfg.idt.traces = Some(dir.join(t));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        self.scheme.validate()?;
        self.scan.validate()?;
        if !(self.physics.gamma_energy_ev > 0.0) || !(self.physics.linewidth_mm_s > 0.0) {
            return bad("physics.gamma_energy_ev and physics.linewidth_mm_s must be positive");
        }
        if self.physics.k0_override_per_m.is_some_and(|k| !(k > 0.0)) {
            return bad("physics.k0_override_per_m must be positive");
        }
        if !(self.modulation.m_per_sqrt_w > 0.0) || !(self.modulation.saw_frequency_hz > 0.0) {
            return bad("modulation.m_per_sqrt_w and modulation.saw_frequency_hz must be positive");
        }
        if !(0.0..1.0).contains(&self.modulation.alpha) {
            return bad("modulation.alpha must lie in [0, 1)");
        }
        if !(self.synth.contrast >= 0.0 && self.synth.contrast < 1.0) {
            return bad("synth.contrast must lie in [0, 1)");
        }
        if self.synth.mod_indices.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            return bad("synth.mod_indices must be positive");
        }
        if self.synth.directions.is_empty() {
            return bad("synth.directions must not be empty");
        }
        let mut dirs = self.synth.directions.clone();
        dirs.sort_by_key(|d| d.label());
        dirs.dedup();
        if dirs.len() != self.synth.directions.len() {
            return bad("synth.directions has duplicates");
        }
        if !(self.synth.velocity_scale > 0.0) || !self.synth.velocity_offset_mm_s.is_finite() {
            return bad("synth.velocity_scale must be positive");
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad("eta must lie in (0, 1]");
        }
        if self.idt.sweep_points < 8 || !(self.idt.sweep_half_span_hz > 0.0) || !(self.idt.relative_noise >= 0.0) {
            return bad("idt sweep needs ≥ 8 points, a positive span and non-negative noise");
        }
        self.idt.design.validate()?;
        Ok(())
    }

    pub fn constants(&self) -> PhysConstants {
        let c = PhysConstants::new(self.physics.gamma_energy_ev);
        match self.physics.k0_override_per_m {
            Some(k) => c.with_k0_override(k),
            None => c,
        }
    }

    pub fn drive_power_for(&self, mod_index: f64) -> f64 {
        (mod_index / self.modulation.m_per_sqrt_w).powi(2)
    }

    pub fn modulation_model(&self, mod_index: f64) -> ModulationModel {
        let c = self.constants();
        ModulationModel::new(
            mod_index,
            self.modulation.alpha,
            2.0 * PI * self.modulation.saw_frequency_hz,
            physics::velocity_to_angular_frequency(self.physics.linewidth_mm_s, &c),
            self.scheme.clone(),
        )
    }

    /// Reference sideband offset for calibration.
    pub fn calibration_spacing_mm_s(&self) -> f64 {
        self.calibration
            .sideband_spacing_mm_s
            .unwrap_or_else(|| self.modulation_model(1.0).sideband_spacing_mm_s(&self.constants()))
    }
}
