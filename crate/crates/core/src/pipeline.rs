//! Stage runner. Every stage reads the files of the stage before it from
//! the output directory and writes its own next to them:
//!
//! ```text
//! spectra/  index.json, <label>.csv + <label>.json
//! fits/     <label>.json, summary.csv
//! calib/    <label>.json, summary.csv, drift.csv
//! extract/  <label>.json, intensities.json, powers.csv
//! globalfit/report.json, curves.csv
//! idt/      model_traces.csv, synthetic_traces.csv, eta_alpha.json, fit.json
//! ```
//!
//! Labels are `p<k>_<acc|dec>`; `k = 0` is the undriven spectrum.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::{calibrate, slope_drift, CalibrationResult};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::extract::{combine_powers, extract_powers, intensities_from_zero_drive, lorentzian_window_fraction, Extraction};
use crate::floquet::synthesize_spectrum;
use crate::globalfit::{extract_c_perp, fit_global, model_curves, CPerp, GlobalFitResult};
use crate::idt::{derive_eta_alpha, fit_sparam_traces, frequency_sweep, model_traces, synthesize_traces, EtaAlpha, IdtFitReport};
use crate::io::{self, read_json, write_csv, write_json, Table};
use crate::physics::Direction;
use crate::specfit::{build_fit_model, fit_spectrum, normalize_by_baseline, SpectrumFit};
use crate::specgen::{acceleration_to_channel_map, compute_budget, generate_counts, Acquisition};

/// Threshold on the slope-drift z-score.
pub const DRIFT_Z_THRESHOLD: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEntry {
    pub label: String,
    /// Index in the power grid; 0 is the undriven spectrum.
    pub power_index: usize,
    pub drive_power_w: f64,
    pub mod_index: f64,
    pub direction: Direction,
    /// Relative to the output directory.
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthIndex {
    pub seed: u64,
    pub entries: Vec<SpectrumEntry>,
}

fn stage_path(out: &Path, stage: &str, file: &str) -> PathBuf {
    out.join(stage).join(file)
}

fn read_index(out: &Path) -> Result<SynthIndex> {
    read_json(&stage_path(out, "spectra", "index.json"))
}

fn f(v: f64) -> String {
    v.to_string()
}

/// Draws every spectrum of the grid, both sweep directions.
pub fn run_synth(cfg: &RunConfig, out: &Path) -> Result<SynthIndex> {
    cfg.validate()?;
    let c = cfg.constants();
    let budget = compute_budget(&cfg.budget)?;
    let mods: Vec<f64> = std::iter::once(0.0).chain(cfg.synth.mod_indices.iter().copied()).collect();
    let mut entries = Vec::new();
    for (k, &m0) in mods.iter().enumerate() {
        for &direction in &cfg.synth.directions {
            let label = format!("p{k}_{}", direction.label());
            entries.push(SpectrumEntry {
                file: format!("spectra/{label}.csv"),
                label,
                power_index: k,
                drive_power_w: cfg.drive_power_for(m0),
                mod_index: m0,
                direction,
            });
        }
    }
    entries.par_iter().enumerate().try_for_each(|(stream, e)| -> Result<()> {
        let scan = cfg.scan.with_direction(e.direction);
        let v: Vec<f64> = acceleration_to_channel_map(&scan)?
            .into_iter()
            .map(|x| cfg.synth.velocity_scale * x + cfg.synth.velocity_offset_mm_s)
            .collect();
        let reference = synthesize_spectrum(&cfg.modulation_model(0.0), &v, &c)?;
        let peak = reference.iter().cloned().fold(0.0, f64::max);
        if !(peak > 0.0) {
            return Err(Error::Config("no absorption line falls inside the scan".into()));
        }
        let s: Vec<f64> = synthesize_spectrum(&cfg.modulation_model(e.mod_index), &v, &c)?.iter().map(|x| x / peak).collect();
        let acq = Acquisition { scan, drive_power_w: e.drive_power_w, seed: cfg.seed, stream: stream as u64 };
        let spectrum = generate_counts(&s, &budget, &cfg.synth.baseline, cfg.synth.contrast, &acq)?;
        io::write_spectrum(&out.join(&e.file), &spectrum)
    })?;
    let index = SynthIndex { seed: cfg.seed, entries };
    write_json(&stage_path(out, "spectra", "index.json"), &index)?;
    Ok(index)
}

/// Fits every spectrum listed in the index.
pub fn run_fit(cfg: &RunConfig, out: &Path) -> Result<Vec<SpectrumFit>> {
    cfg.validate()?;
    let c = cfg.constants();
    let index = read_index(out)?;
    let fits: Vec<SpectrumFit> = index
        .entries
        .par_iter()
        .map(|e| {
            let spectrum = io::read_spectrum(&out.join(&e.file))?;
            let model = build_fit_model(&cfg.scheme, &cfg.modulation_model(e.mod_index), &spectrum.scan, &c)?;
            let fit = fit_spectrum(&spectrum, &model, &cfg.fit)?;
            write_json(&stage_path(out, "fits", &format!("{}.json", e.label)), &fit)?;
            Ok(fit)
        })
        .collect::<Result<_>>()?;
    let mut t = Table::new(&["label", "direction", "power_W", "chi2_reduced", "dof", "runs_p", "converged", "free_peaks"]);
    for (e, fit) in index.entries.iter().zip(&fits) {
        t.push([
            e.label.clone(),
            e.direction.label().to_string(),
            f(e.drive_power_w),
            f(fit.chi2_reduced),
            fit.dof.to_string(),
            f(fit.runs_test.p_value),
            fit.converged.to_string(),
            fit.peaks.iter().filter(|p| p.free).count().to_string(),
        ]);
    }
    write_csv(&stage_path(out, "fits", "summary.csv"), &t)?;
    Ok(fits)
}

fn read_fit(out: &Path, label: &str) -> Result<SpectrumFit> {
    read_json(&stage_path(out, "fits", &format!("{label}.json")))
}

fn read_calibration(out: &Path, label: &str) -> Result<CalibrationResult> {
    read_json(&stage_path(out, "calib", &format!("{label}.json")))
}

/// Calibrates every fit and compares each slope with the undriven one of
/// the same sweep direction.
pub fn run_calibrate(cfg: &RunConfig, out: &Path) -> Result<Vec<CalibrationResult>> {
    cfg.validate()?;
    let index = read_index(out)?;
    let spacing = cfg.calibration_spacing_mm_s();
    let cals: Vec<CalibrationResult> = index
        .entries
        .par_iter()
        .map(|e| {
            let cal = calibrate(&read_fit(out, &e.label)?, &cfg.scheme, spacing, &cfg.calibration)?;
            write_json(&stage_path(out, "calib", &format!("{}.json", e.label)), &cal)?;
            Ok(cal)
        })
        .collect::<Result<_>>()?;
    let mut t = Table::new(&[
        "label", "direction", "power_W", "slope", "slope_sigma", "intercept", "intercept_sigma", "rms_mm_s", "chi2_reduced",
        "trend_t", "trend_p", "references",
    ]);
    for (e, cal) in index.entries.iter().zip(&cals) {
        t.push([
            e.label.clone(),
            e.direction.label().to_string(),
            f(e.drive_power_w),
            f(cal.slope),
            f(cal.slope_uncertainty),
            f(cal.intercept),
            f(cal.intercept_uncertainty),
            f(cal.rms_mm_s),
            f(cal.chi2_reduced),
            f(cal.quadratic_trend.t),
            f(cal.quadratic_trend.p_value),
            cal.matches.iter().filter(|m| m.used).count().to_string(),
        ]);
    }
    write_csv(&stage_path(out, "calib", "summary.csv"), &t)?;
    let mut drift = Table::new(&["label", "reference", "relative_change", "z", "detected"]);
    for (e, cal) in index.entries.iter().zip(&cals) {
        let Some(r) = index.entries.iter().position(|o| o.power_index == 0 && o.direction == e.direction) else {
            continue;
        };
        if e.power_index == 0 {
            continue;
        }
        let d = slope_drift(&cals[r], cal, DRIFT_Z_THRESHOLD);
        drift.push([e.label.clone(), index.entries[r].label.clone(), f(d.relative_change), f(d.z), d.detected.to_string()]);
    }
    write_csv(&stage_path(out, "calib", "drift.csv"), &drift)?;
    Ok(cals)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineIntensityReport {
    /// Velocity-space areas of the inner, middle and outer lines.
    pub inner: f64,
    pub middle: f64,
    pub outer: f64,
    /// Spectra the values are averaged over.
    pub sources: Vec<String>,
    /// Lorentzian area inside the integration window.
    pub window_fraction: f64,
}

/// Integrates and inverts every driven spectrum; combines the sweep
/// directions of each drive power into `powers.csv`.
pub fn run_extract(cfg: &RunConfig, out: &Path) -> Result<Vec<crate::extract::SidebandPowers>> {
    cfg.validate()?;
    let c = cfg.constants();
    let index = read_index(out)?;
    let zero: Vec<&SpectrumEntry> = index.entries.iter().filter(|e| e.power_index == 0).collect();
    if zero.is_empty() {
        return Err(Error::InvalidInput("no undriven spectrum to measure line intensities".into()));
    }
    let mut sum = [0.0; 3];
    for e in &zero {
        let abc = intensities_from_zero_drive(&read_fit(out, &e.label)?, &read_calibration(out, &e.label)?)?;
        for i in 0..3 {
            sum[i] += abc[i] / zero.len() as f64;
        }
    }
    let report = LineIntensityReport {
        inner: sum[0],
        middle: sum[1],
        outer: sum[2],
        sources: zero.iter().map(|e| e.label.clone()).collect(),
        window_fraction: lorentzian_window_fraction(cfg.extract.window_half_width, 1.0),
    };
    write_json(&stage_path(out, "extract", "intensities.json"), &report)?;
    let template = build_fit_model(&cfg.scheme, &cfg.modulation_model(1.0), &cfg.scan, &c)?;
    let driven: Vec<&SpectrumEntry> = index.entries.iter().filter(|e| e.power_index > 0).collect();
    let parts: Vec<(usize, Extraction)> = driven
        .par_iter()
        .map(|e| {
            let spectrum = io::read_spectrum(&out.join(&e.file))?;
            let fit = read_fit(out, &e.label)?;
            let cal = read_calibration(out, &e.label)?;
            let norm = normalize_by_baseline(&spectrum, &fit)?;
            let ex = extract_powers(&norm, &fit, &cal, &template, sum, &cfg.extract)?;
            write_json(&stage_path(out, "extract", &format!("{}.json", e.label)), &ex)?;
            Ok((e.power_index, ex))
        })
        .collect::<Result<_>>()?;
    let mut by_power: BTreeMap<usize, Vec<crate::extract::SidebandPowers>> = BTreeMap::new();
    for (k, ex) in parts {
        by_power.entry(k).or_default().push(ex.powers);
    }
    let powers: Vec<_> = by_power.values().map(|v| combine_powers(v)).collect::<Result<_>>()?;
    io::write_powers(&stage_path(out, "extract", "powers.csv"), &powers)?;
    Ok(powers)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalReport {
    pub fit: GlobalFitResult,
    pub eta: f64,
    pub k0_per_m: f64,
    /// Out-of-plane displacement constant (m/√W).
    pub c_perp: CPerp,
    pub summary: String,
}

pub fn c_perp_summary(c: &CPerp, fit: &GlobalFitResult) -> String {
    format!(
        "C_perp = {:.3e} ± {:.1e} m/sqrt(W) (m = {:.3} ± {:.3}, alpha = {:.3} ± {:.3}, chi2_nu = {:.2})",
        c.value, c.uncertainty, fit.m, fit.m_uncertainty, fit.alpha, fit.alpha_uncertainty, fit.chi2_reduced
    )
}

pub fn run_globalfit(cfg: &RunConfig, out: &Path) -> Result<GlobalReport> {
    cfg.validate()?;
    let powers = io::read_powers(&stage_path(out, "extract", "powers.csv"))?;
    let fit = fit_global(&powers, &cfg.globalfit)?;
    let k0 = cfg.constants().k0_per_m;
    let c_perp = extract_c_perp(fit.m, fit.m_uncertainty, cfg.eta, k0)?;
    let max_p = powers.iter().map(|p| p.drive_power_w).fold(0.0, f64::max);
    let mut t = Table::new(&["power_W", "model_P0", "model_P1", "model_P2"]);
    for (p, v) in model_curves(&fit, 1.2 * max_p, 121)? {
        t.push([f(p), f(v[0]), f(v[1]), f(v[2])]);
    }
    write_csv(&stage_path(out, "globalfit", "curves.csv"), &t)?;
    let report = GlobalReport { summary: c_perp_summary(&c_perp, &fit), fit, eta: cfg.eta, k0_per_m: k0, c_perp };
    write_json(&stage_path(out, "globalfit", "report.json"), &report)?;
    Ok(report)
}

/// Model and noisy synthetic traces of the configured device.
pub fn run_idt_model(cfg: &RunConfig, out: &Path) -> Result<EtaAlpha> {
    cfg.validate()?;
    let d = &cfg.idt.design;
    let freq = frequency_sweep(d.center_angular_freq / (2.0 * std::f64::consts::PI), cfg.idt.sweep_half_span_hz, cfg.idt.sweep_points);
    io::write_traces(&stage_path(out, "idt", "model_traces.csv"), &model_traces(d, &freq)?)?;
    let noisy = synthesize_traces(d, &freq, cfg.idt.relative_noise, cfg.seed)?;
    io::write_traces(&stage_path(out, "idt", "synthetic_traces.csv"), &noisy)?;
    let ea = derive_eta_alpha(d)?;
    write_json(&stage_path(out, "idt", "eta_alpha.json"), &ea)?;
    Ok(ea)
}

/// Fits the configured traces, or the synthesized ones when none are given.
pub fn run_idt_fit(cfg: &RunConfig, out: &Path) -> Result<IdtFitReport> {
    cfg.validate()?;
    let path = cfg.idt.traces.clone().unwrap_or_else(|| stage_path(out, "idt", "synthetic_traces.csv"));
    let traces = io::read_traces(&path)?;
    let initial = cfg.idt.initial.unwrap_or(cfg.idt.design);
    let rep = fit_sparam_traces(&traces, &initial, &cfg.idt.fit)?;
    if !rep.converged {
        return Err(Error::NonConvergence { iterations: rep.iterations, chi2: rep.chi2 });
    }
    write_json(&stage_path(out, "idt", "fit.json"), &rep)?;
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub spectra: usize,
    pub global: GlobalReport,
    pub idt_model: EtaAlpha,
    pub idt_fit: IdtFitReport,
}

/// All stages in order.
pub fn run_all(cfg: &RunConfig, out: &Path) -> Result<PipelineSummary> {
    let index = run_synth(cfg, out)?;
    run_fit(cfg, out)?;
    run_calibrate(cfg, out)?;
    run_extract(cfg, out)?;
    let global = run_globalfit(cfg, out)?;
    let idt_model = run_idt_model(cfg, out)?;
    let idt_fit = run_idt_fit(cfg, out)?;
    Ok(PipelineSummary { spectra: index.entries.len(), global, idt_model, idt_fit })
}
