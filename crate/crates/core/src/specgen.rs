//! Synthetic spectrometer: counting budget, scan geometry and Poisson
//! channel counts.
//!
//! Every spectrum draws from its own ChaCha8 stream: the generator is seeded
//! with the run seed and `set_stream` selects the spectrum index, so spectra
//! are independent and can be generated in any order or in parallel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physics::{Direction, ScanParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetConfig {
    pub source_activity_bq: f64,
    /// Fraction of ⁵⁷Co decays feeding the 136 keV level.
    pub ec_branching: f64,
    /// Fraction of 136 keV decays passing through the 14.4 keV level.
    pub transition_probability: f64,
    /// Internal-conversion coefficient; γ survival is `1/(1 + α_ic)`.
    pub internal_conversion_coeff: f64,
    pub solid_angle_fraction: f64,
    pub substrate_transmission: f64,
    /// Compton counts per detected resonant-energy photon.
    pub compton_per_resonant: f64,
    /// Collimator-mismatch counts per detected resonant-energy photon.
    pub mismatch_per_resonant: f64,
    /// Spectrometer energy bins sharing the total rate.
    pub spectrometer_bins: usize,
    /// Replaces `total / spectrometer_bins` when set.
    pub per_bin_rate_override_hz: Option<f64>,
    pub duration_s: f64,
}

pub const TEN_DAYS_S: f64 = 10.0 * 86_400.0;

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            source_activity_bq: 1e9,
            ec_branching: 0.998,
            transition_probability: 0.89,
            internal_conversion_coeff: 8.56,
            solid_angle_fraction: 3.2e-5,
            substrate_transmission: 0.42,
            compton_per_resonant: 0.38,
            mismatch_per_resonant: 0.36,
            spectrometer_bins: 1000,
            per_bin_rate_override_hz: None,
            duration_s: TEN_DAYS_S,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountingBudget {
    pub source_activity_bq: f64,
    pub detected_fraction_14kev: f64,
    pub resonant_rate_hz: f64,
    pub compton_rate_hz: f64,
    pub mismatch_rate_hz: f64,
    pub total_rate_hz: f64,
    pub per_bin_rate_hz: f64,
    pub duration_s: f64,
}

pub fn compute_budget(cfg: &BudgetConfig) -> Result<CountingBudget> {
    let factors = [
        ("source_activity_bq", cfg.source_activity_bq),
        ("ec_branching", cfg.ec_branching),
        ("transition_probability", cfg.transition_probability),
        ("internal_conversion_coeff", cfg.internal_conversion_coeff),
        ("solid_angle_fraction", cfg.solid_angle_fraction),
        ("substrate_transmission", cfg.substrate_transmission),
        ("compton_per_resonant", cfg.compton_per_resonant),
        ("mismatch_per_resonant", cfg.mismatch_per_resonant),
        ("duration_s", cfg.duration_s),
    ];
    for (name, v) in factors {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::Config(format!("budget.{name} must be >= 0, got {v}")));
        }
    }
    if cfg.spectrometer_bins == 0 {
        return Err(Error::Config("budget.spectrometer_bins must be >= 1".into()));
    }
    let detected = cfg.ec_branching
        * cfg.transition_probability
        * (1.0 / (1.0 + cfg.internal_conversion_coeff))
        * cfg.solid_angle_fraction
        * cfg.substrate_transmission;
    let resonant = cfg.source_activity_bq * detected;
    let compton = resonant * cfg.compton_per_resonant;
    let mismatch = resonant * cfg.mismatch_per_resonant;
    let total = resonant + compton + mismatch;
    let per_bin = match cfg.per_bin_rate_override_hz {
        Some(r) if r.is_finite() && r >= 0.0 => r,
        Some(r) => return Err(Error::Config(format!("budget.per_bin_rate_override_hz invalid: {r}"))),
        None => total / cfg.spectrometer_bins as f64,
    };
    Ok(CountingBudget {
        source_activity_bq: cfg.source_activity_bq,
        detected_fraction_14kev: detected,
        resonant_rate_hz: resonant,
        compton_rate_hz: compton,
        mismatch_rate_hz: mismatch,
        total_rate_hz: total,
        per_bin_rate_hz: per_bin,
        duration_s: cfg.duration_s,
    })
}

/// Fifth-order polynomial in the normalized channel coordinate `t ∈ [−1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Baseline(pub [f64; 6]);

impl Default for Baseline {
    /// Gentle curvature from the moving source's changing solid angle.
    fn default() -> Self {
        Baseline([1.0, 0.004, -0.012, -0.002, 0.003, 0.0])
    }
}

impl Baseline {
    pub const FLAT: Baseline = Baseline([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

    pub fn eval(&self, t: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, c| acc * t + c)
    }
}

/// Maps channel index to `t ∈ [−1, 1]`.
pub fn normalized_coordinate(channel: usize, n_channels: usize) -> f64 {
    if n_channels < 2 {
        return 0.0;
    }
    2.0 * channel as f64 / (n_channels - 1) as f64 - 1.0
}

/// Nominal Doppler velocity of each channel for a constant-|a| sweep.
///
/// The source velocity is linear in time, so equal-time channels are equally
/// spaced in velocity; the decelerating half runs from `v_max` down to
/// `v_min`.
pub fn acceleration_to_channel_map(scan: &ScanParams) -> Result<Vec<f64>> {
    scan.validate()?;
    let n = scan.n_channels;
    let span = scan.v_max_mm_s - scan.v_min_mm_s;
    let up = |i: usize| {
        if i == n - 1 {
            scan.v_max_mm_s
        } else {
            scan.v_min_mm_s + span * i as f64 / (n - 1) as f64
        }
    };
    Ok(match scan.direction {
        Direction::Accelerating => (0..n).map(up).collect(),
        Direction::Decelerating => (0..n).map(|i| up(n - 1 - i)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountSpectrum {
    pub channels: Vec<usize>,
    pub counts: Vec<u64>,
    pub scan: ScanParams,
    pub drive_power_w: f64,
    pub seed: u64,
    pub stream: u64,
    pub duration_s: f64,
}

impl CountSpectrum {
    pub fn validate(&self) -> Result<()> {
        self.scan.validate()?;
        if self.counts.len() != self.scan.n_channels || self.channels.len() != self.counts.len() {
            return Err(Error::InvalidInput(format!(
                "spectrum has {} counts and {} channels, scan declares {}",
                self.counts.len(),
                self.channels.len(),
                self.scan.n_channels
            )));
        }
        if self.channels.iter().enumerate().any(|(i, &c)| c != i) {
            return Err(Error::InvalidInput("channel indices must run 0..n-1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Acquisition {
    pub scan: ScanParams,
    pub drive_power_w: f64,
    pub seed: u64,
    pub stream: u64,
}

/// Expected counts `duration·rate·B(t)·(1 − contrast·S)` per channel.
pub fn expected_counts(
    model_spectrum: &[f64],
    budget: &CountingBudget,
    baseline: &Baseline,
    contrast: f64,
) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&contrast) {
        return Err(Error::Config(format!("contrast must lie in [0, 1), got {contrast}")));
    }
    let n = model_spectrum.len();
    let scale = budget.duration_s * budget.per_bin_rate_hz;
    let mut out = Vec::with_capacity(n);
    for (i, &s) in model_spectrum.iter().enumerate() {
        if !(s.is_finite() && s >= 0.0) {
            return Err(Error::InvalidInput(format!("model spectrum value {s} at channel {i}")));
        }
        let mu = scale * baseline.eval(normalized_coordinate(i, n)) * (1.0 - contrast * s);
        if !(mu.is_finite() && mu >= 0.0) {
            return Err(Error::InvalidInput(format!("negative expected counts {mu} at channel {i}")));
        }
        out.push(mu);
    }
    Ok(out)
}

/// Draws Poisson counts around [`expected_counts`]. `model_spectrum` is the
/// absorption on the channel grid, normalized to the unmodulated peak.
pub fn generate_counts(
    model_spectrum: &[f64],
    budget: &CountingBudget,
    baseline: &Baseline,
    contrast: f64,
    acq: &Acquisition,
) -> Result<CountSpectrum> {
    acq.scan.validate()?;
    if model_spectrum.len() != acq.scan.n_channels {
        return Err(Error::InvalidInput(format!(
            "model spectrum has {} points, scan has {} channels",
            model_spectrum.len(),
            acq.scan.n_channels
        )));
    }
    let mu = expected_counts(model_spectrum, budget, baseline, contrast)?;
    let mut rng = ChaCha8Rng::seed_from_u64(acq.seed);
    rng.set_stream(acq.stream);
    let counts = mu
        .iter()
        .map(|&m| {
            if m == 0.0 {
                Ok(0)
            } else {
                let d = Poisson::new(m).map_err(|e| Error::InvalidInput(format!("Poisson mean {m}: {e}")))?;
                Ok(d.sample(&mut rng) as u64)
            }
        })
        .collect::<Result<Vec<u64>>>()?;
    Ok(CountSpectrum {
        channels: (0..counts.len()).collect(),
        counts,
        scan: acq.scan,
        drive_power_w: acq.drive_power_w,
        seed: acq.seed,
        stream: acq.stream,
        duration_s: budget.duration_s,
    })
}
