//! Cross-field model of the interdigital transducers and the delay-line
//! S-parameters built from it.
//!
//! `C_FF` is a capacitance per finger period per metre of aperture, so the
//! total capacitance is `N·W·C_FF` and the admittance prefactor carries the
//! same `W`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{self, LeastSquaresProblem, LmOptions};

/// Converts a loss in dB to an amplitude factor, `10^(dB/20)`.
pub fn db_to_amplitude(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

pub const PROPAGATION_LOSS_DB: f64 = -1.68;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdtDesign {
    pub n_periods: f64,
    pub aperture_m: f64,
    pub wavelength_m: f64,
    pub center_angular_freq: f64,
    pub coupling_k2: f64,
    /// F per finger period per metre of aperture.
    pub cap_per_period_f_per_m: f64,
    pub shunt_r_l_ohm: f64,
    pub source_z_ohm: f64,
    /// Amplitude factor, not dB.
    pub propagation_loss: f64,
}

impl Default for IdtDesign {
    /// Literature-typical ST-quartz values; not fitted to any device.
    fn default() -> Self {
        Self {
            n_periods: 200.0,
            aperture_m: 970e-6,
            wavelength_m: 32e-6,
            center_angular_freq: 2.0 * PI * 97.9e6,
            coupling_k2: 1.1e-3,
            cap_per_period_f_per_m: 0.5e-12 / 1e-2,
            shunt_r_l_ohm: 5.0,
            source_z_ohm: 50.0,
            propagation_loss: db_to_amplitude(PROPAGATION_LOSS_DB),
        }
    }
}

impl IdtDesign {
    /// Reference device whose `derive_eta_alpha` gives η = 0.35, α = 0.34
    /// with a 5 Ω shunt and −1.68 dB propagation loss.
    pub fn reference_device() -> Self {
        Self { coupling_k2: 7.709_981_89e-4, cap_per_period_f_per_m: 1.444_555_60e-10, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_periods", self.n_periods),
            ("aperture_m", self.aperture_m),
            ("wavelength_m", self.wavelength_m),
            ("center_angular_freq", self.center_angular_freq),
            ("coupling_k2", self.coupling_k2),
            ("cap_per_period_f_per_m", self.cap_per_period_f_per_m),
            ("shunt_r_l_ohm", self.shunt_r_l_ohm),
            ("source_z_ohm", self.source_z_ohm),
            ("propagation_loss", self.propagation_loss),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("idt.{name} must be positive, got {v}")));
            }
        }
        if self.coupling_k2 >= 0.1 {
            return Err(Error::Config(format!("idt.coupling_k2 = {} is not small", self.coupling_k2)));
        }
        Ok(())
    }

    pub fn total_capacitance(&self) -> f64 {
        self.n_periods * self.aperture_m * self.cap_per_period_f_per_m
    }

    fn admittance_prefactor(&self) -> f64 {
        4.0 / PI
            * self.coupling_k2
            * self.center_angular_freq
            * self.cap_per_period_f_per_m
            * self.aperture_m
            * self.n_periods
            * self.n_periods
    }
}

/// `x = Nπ(Ω − Ω_saw)/Ω_saw`.
pub fn normalized_detuning(omega: f64, design: &IdtDesign) -> f64 {
    design.n_periods * PI * (omega - design.center_angular_freq) / design.center_angular_freq
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Admittance {
    pub g_a: f64,
    pub b_a: f64,
    pub c_t: f64,
}

pub fn acoustic_admittance(x: f64, design: &IdtDesign) -> Admittance {
    let g0 = design.admittance_prefactor();
    let (sinc2, hilbert) = if x.abs() < 1e-4 {
        let x2 = x * x;
        (1.0 - x2 / 3.0, -2.0 * x / 3.0 + 2.0 * x * x2 / 15.0)
    } else {
        let s = x.sin() / x;
        (s * s, ((2.0 * x).sin() - 2.0 * x) / (2.0 * x * x))
    };
    Admittance { g_a: g0 * sinc2, b_a: g0 * hilbert, c_t: design.total_capacitance() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SParams {
    pub freq: f64,
    pub s11: Complex64,
    pub s12: Complex64,
    pub s22: Complex64,
}

/// Power-wave S-parameters of the source / shunt / acoustic-port network.
/// Returns `(S11, S22, S12)`.
pub fn power_wave_sparams(z1: Complex64, z2: Complex64, zl: Complex64) -> (Complex64, Complex64, Complex64) {
    let s11 = (zl * z2 - z1.conj() * (zl + z2)) / (zl * z2 + z1 * (zl + z2));
    let s22 = (zl * z1 - z2.conj() * (zl + z1)) / (zl * z1 + z2 * (zl + z1));
    let s12 = (z1.re.sqrt() / z2.re.sqrt()) * (zl * (z2 + z2.conj())) / (z1 * z2 + zl * (z1 + z2));
    (s11, s22, s12)
}

/// S-parameters of one transducer at angular frequency `omega`.
///
/// Where `G_a = 0` the acoustic port is open: `S'12 = 0`, `S'22 = −1` and
/// `S'11` is the reflection off the shunt alone.
pub fn single_transducer_sparams(omega: f64, design: &IdtDesign) -> Result<SParams> {
    if !omega.is_finite() || omega <= 0.0 {
        return Err(Error::Domain(format!("angular frequency {omega} must be positive")));
    }
    let adm = acoustic_admittance(normalized_detuning(omega, design), design);
    let z1 = Complex64::new(design.source_z_ohm, 0.0);
    let zl = Complex64::new(design.shunt_r_l_ohm, 0.0)
        + Complex64::new(0.0, omega * adm.c_t + adm.b_a).inv();
    if adm.g_a <= f64::MIN_POSITIVE {
        let s11 = (zl - z1.conj()) / (zl + z1);
        return Ok(SParams { freq: omega, s11, s12: Complex64::new(0.0, 0.0), s22: Complex64::new(-1.0, 0.0) });
    }
    let z2 = Complex64::new(1.0 / adm.g_a, 0.0);
    let (s11, s22, s12) = power_wave_sparams(z1, z2, zl);
    Ok(SParams { freq: omega, s11, s12, s22 })
}

/// Two identical transducers facing each other across the film.
pub fn device_sparams(omega: f64, design: &IdtDesign) -> Result<SParams> {
    let single = single_transducer_sparams(omega, design)?;
    Ok(SParams {
        freq: omega,
        s11: single.s11,
        s12: single.s12 * single.s12 * (design.propagation_loss / 2.0),
        s22: single.s11,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaAlpha {
    pub eta: f64,
    pub alpha: f64,
    pub eta_phase_rad: f64,
    pub alpha_phase_rad: f64,
}

/// Electro-acoustic efficiency η and reflection α at the center frequency.
pub fn derive_eta_alpha(design: &IdtDesign) -> Result<EtaAlpha> {
    design.validate()?;
    let s = single_transducer_sparams(design.center_angular_freq, design)?;
    let eta = s.s12 * (design.propagation_loss / 2.0).sqrt();
    let alpha = s.s22 * (design.propagation_loss / 2.0);
    Ok(EtaAlpha { eta: eta.norm(), alpha: alpha.norm(), eta_phase_rad: eta.arg(), alpha_phase_rad: alpha.arg() })
}

/// Measured or modeled device traces on a common frequency grid.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SParamTraces {
    pub freq_hz: Vec<f64>,
    pub s11: Vec<Complex64>,
    pub s12: Vec<Complex64>,
}

impl SParamTraces {
    pub fn validate(&self) -> Result<()> {
        let n = self.freq_hz.len();
        if n < 8 || self.s11.len() != n || self.s12.len() != n {
            return Err(Error::InvalidInput(format!(
                "S-parameter traces need ≥ 8 equal-length points (freq {}, s11 {}, s12 {})",
                n,
                self.s11.len(),
                self.s12.len()
            )));
        }
        if self.freq_hz.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::InvalidInput("trace frequencies must be positive".into()));
        }
        Ok(())
    }
}

pub fn frequency_sweep(center_hz: f64, half_span_hz: f64, n_points: usize) -> Vec<f64> {
    let step = 2.0 * half_span_hz / (n_points.max(2) - 1) as f64;
    (0..n_points).map(|i| center_hz - half_span_hz + i as f64 * step).collect()
}

pub fn model_traces(design: &IdtDesign, freq_hz: &[f64]) -> Result<SParamTraces> {
    let mut out = SParamTraces { freq_hz: freq_hz.to_vec(), ..Default::default() };
    for &f in freq_hz {
        let s = device_sparams(2.0 * PI * f, design)?;
        out.s11.push(s.s11);
        out.s12.push(s.s12);
    }
    Ok(out)
}

/// Model traces with independent Gaussian multiplicative noise of relative
/// size `relative_noise` on every complex sample.
pub fn synthesize_traces(design: &IdtDesign, freq_hz: &[f64], relative_noise: f64, seed: u64) -> Result<SParamTraces> {
    let mut traces = model_traces(design, freq_hz)?;
    if relative_noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, relative_noise).map_err(|e| Error::Config(e.to_string()))?;
        for s in traces.s11.iter_mut().chain(traces.s12.iter_mut()) {
            *s *= 1.0 + normal.sample(&mut rng);
        }
    }
    Ok(traces)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdtFitOptions {
    /// Assumed relative uncertainty of each magnitude sample.
    pub relative_noise: f64,
    pub lm: LmOptions,
}

impl Default for IdtFitOptions {
    fn default() -> Self {
        Self { relative_noise: 0.01, lm: LmOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdtFitReport {
    pub design: IdtDesign,
    /// Relative 1σ uncertainties of k², C_FF, R_L, η_p and Ω_saw.
    pub relative_uncertainty: [f64; 5],
    pub chi2: f64,
    pub chi2_reduced: f64,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub eta_alpha: EtaAlpha,
    /// 1σ of η and α propagated from the parameter covariance.
    pub eta_sigma: f64,
    pub alpha_sigma: f64,
}

struct TraceFit<'a> {
    traces: &'a SParamTraces,
    base: IdtDesign,
    sigma11: Vec<f64>,
    sigma12: Vec<f64>,
}

impl TraceFit<'_> {
    // Parameters: ln k², ln C_FF, ln R_L, ln η_p, N·(Ω/Ω_base − 1).
    fn design(&self, p: &DVector<f64>) -> IdtDesign {
        IdtDesign {
            coupling_k2: p[0].exp(),
            cap_per_period_f_per_m: p[1].exp(),
            shunt_r_l_ohm: p[2].exp(),
            propagation_loss: p[3].exp(),
            center_angular_freq: self.base.center_angular_freq * (1.0 + p[4] / self.base.n_periods),
            ..self.base
        }
    }

    fn start(&self) -> DVector<f64> {
        DVector::from_vec(vec![
            self.base.coupling_k2.ln(),
            self.base.cap_per_period_f_per_m.ln(),
            self.base.shunt_r_l_ohm.ln(),
            self.base.propagation_loss.ln(),
            0.0,
        ])
    }
}

impl LeastSquaresProblem for TraceFit<'_> {
    fn n_params(&self) -> usize {
        5
    }

    fn residuals(&self, p: &DVector<f64>) -> Result<DVector<f64>> {
        let design = self.design(p);
        let n = self.traces.freq_hz.len();
        let mut r = DVector::zeros(2 * n);
        for (i, &f) in self.traces.freq_hz.iter().enumerate() {
            let s = device_sparams(2.0 * PI * f, &design)?;
            r[i] = (s.s11.norm() - self.traces.s11[i].norm()) / self.sigma11[i];
            r[n + i] = (s.s12.norm() - self.traces.s12[i].norm()) / self.sigma12[i];
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite S-parameter model".into()));
        }
        Ok(r)
    }

    fn jacobian(&self, p: &DVector<f64>) -> Result<DMatrix<f64>> {
        lm::numeric_jacobian(|q| self.residuals(q), p, 1e-6)
    }
}

/// Least-squares fit of (k², C_FF, R_L, η_p, Ω_saw) to the magnitudes of
/// measured |S11| and |S12|; geometry and source impedance stay fixed.
pub fn fit_sparam_traces(traces: &SParamTraces, initial: &IdtDesign, opts: &IdtFitOptions) -> Result<IdtFitReport> {
    traces.validate()?;
    initial.validate()?;
    if !(opts.relative_noise > 0.0) {
        return Err(Error::Config("idt fit relative_noise must be positive".into()));
    }
    let sigma = |v: &[Complex64]| -> Vec<f64> {
        let peak = v.iter().map(|s| s.norm()).fold(0.0, f64::max);
        v.iter().map(|s| opts.relative_noise * s.norm().max(1e-3 * peak).max(f64::MIN_POSITIVE)).collect()
    };
    let problem = TraceFit { traces, base: *initial, sigma11: sigma(&traces.s11), sigma12: sigma(&traces.s12) };
    let rep = lm::minimize(&problem, problem.start(), &opts.lm)?;
    let design = problem.design(&rep.params);
    let se = rep.std_errors();
    // Log parameters: σ_rel = σ_ln; the frequency shift maps through 1/N.
    let relative_uncertainty = [se[0], se[1], se[2], se[3], se[4] / initial.n_periods];
    let eta_alpha = derive_eta_alpha(&design)?;
    // Central differences in the fit parameters.
    let k = rep.params.len();
    let mut g_eta = DVector::zeros(k);
    let mut g_alpha = DVector::zeros(k);
    for i in 0..k {
        let h = 1e-6 * rep.params[i].abs().max(1.0);
        let mut hi = rep.params.clone();
        let mut lo = rep.params.clone();
        hi[i] += h;
        lo[i] -= h;
        let (a, b) = (derive_eta_alpha(&problem.design(&hi))?, derive_eta_alpha(&problem.design(&lo))?);
        g_eta[i] = (a.eta - b.eta) / (2.0 * h);
        g_alpha[i] = (a.alpha - b.alpha) / (2.0 * h);
    }
    let eta_sigma = g_eta.dot(&(&rep.covariance * &g_eta)).max(0.0).sqrt();
    let alpha_sigma = g_alpha.dot(&(&rep.covariance * &g_alpha)).max(0.0).sqrt();
    Ok(IdtFitReport {
        eta_alpha,
        eta_sigma,
        alpha_sigma,
        design,
        relative_uncertainty,
        chi2: rep.chi2,
        chi2_reduced: rep.chi2_reduced(),
        residual_norm: rep.chi2.sqrt(),
        iterations: rep.iterations,
        converged: rep.converged,
    })
}
