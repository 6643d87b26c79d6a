use std::f64::consts::PI;

use mossbauer_saw::floquet::{synthesize_spectrum, ModulationModel};
use mossbauer_saw::physics::{self, default_alpha_fe_scheme, Direction, PhysConstants, ScanParams};
use mossbauer_saw::specfit::{
    build_fit_model, fit_baseline_only, fit_profile, fit_spectrum, nominal_channel, normalize_by_baseline, FitOptions,
    ProfileData,
};
use mossbauer_saw::specgen::{
    acceleration_to_channel_map, compute_budget, generate_counts, Acquisition, Baseline, BudgetConfig, CountSpectrum,
};

fn modulation(m0: f64) -> ModulationModel {
    let c = PhysConstants::default();
    ModulationModel::new(
        m0,
        0.36,
        2.0 * PI * 97.9e6,
        physics::velocity_to_angular_frequency(0.25, &c),
        default_alpha_fe_scheme(),
    )
}

fn synth(m0: f64, direction: Direction, duration_scale: f64, seed: u64) -> (CountSpectrum, Vec<f64>) {
    let c = PhysConstants::default();
    let scan = ScanParams::default().with_direction(direction);
    let v = acceleration_to_channel_map(&scan).unwrap();
    let reference = synthesize_spectrum(&modulation(0.0), &v, &c).unwrap();
    let peak = reference.iter().cloned().fold(0.0, f64::max);
    let s: Vec<f64> = synthesize_spectrum(&modulation(m0), &v, &c).unwrap().iter().map(|x| x / peak).collect();
    let cfg = BudgetConfig { per_bin_rate_override_hz: Some(2.2), ..Default::default() };
    let mut budget = compute_budget(&cfg).unwrap();
    budget.duration_s *= duration_scale;
    let acq = Acquisition { scan, drive_power_w: 0.0, seed, stream: 0 };
    (generate_counts(&s, &budget, &Baseline::default(), 0.03, &acq).unwrap(), s)
}

#[test]
fn modulated_round_trip() {
    let c = PhysConstants::default();
    for (direction, seed) in [(Direction::Accelerating, 11), (Direction::Decelerating, 12)] {
        let (spec, _) = synth(2.0, direction, 1.0, seed);
        let model = build_fit_model(&default_alpha_fe_scheme(), &modulation(2.0), &spec.scan, &c).unwrap();
        let fit = fit_spectrum(&spec, &model, &FitOptions::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.chi2_reduced > 0.8 && fit.chi2_reduced < 1.3, "chi2 {}", fit.chi2_reduced);
        assert!(fit.runs_test.passes(0.05), "{:?}", fit.runs_test);
        assert_eq!(fit.parameter_count(), 32);
        let weights = modulation(2.0).sideband_weights().unwrap();
        let scheme = default_alpha_fe_scheme();
        let mut z = Vec::new();
        for (p, tp) in fit.peaks.iter().zip(&model.peaks).filter(|(p, _)| p.free) {
            // Merged components pull the single Lorentzian to their weighted centroid.
            let (mut num, mut den) = (0.0, 0.0);
            for comp in &tp.components {
                let w = scheme.line_intensity(comp.line) * weights.weight(comp.order);
                num += w * comp.velocity_mm_s;
                den += w;
            }
            let truth = nominal_channel(&spec.scan, num / den);
            z.push(((p.position - truth) / p.position_sigma).abs());
        }
        let within3 = z.iter().filter(|&&v| v < 3.0).count();
        assert!(within3 as f64 >= 0.9 * z.len() as f64, "{z:?}");
        assert!(z.iter().all(|&v| v < 4.0), "{z:?}");
        let width = 0.25 / spec.scan.channel_width();
        assert!((fit.linewidth / width - 1.0).abs() < 0.05, "{} vs {width}", fit.linewidth);
    }
}

#[test]
fn zero_drive_depth_and_normalization() {
    let c = PhysConstants::default();
    let (spec, s) = synth(0.0, Direction::Accelerating, 1.0, 3);
    let model = build_fit_model(&default_alpha_fe_scheme(), &modulation(0.0), &spec.scan, &c).unwrap();
    let fit = fit_spectrum(&spec, &model, &FitOptions::default()).unwrap();
    assert_eq!(fit.peaks.len(), 6);
    let norm = normalize_by_baseline(&spec, &fit).unwrap();
    // Deepest channel sits at 1 − contrast within a few σ.
    let k = (0..s.len()).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
    assert!((norm.values[k] - (1.0 - 0.03 * s[k])).abs() < 4.0 * norm.sigma[k]);
    assert!((1.0 - norm.values[k] - 0.03).abs() < 0.002);
    // Far from every line the ratio is flat at 1.
    let v = acceleration_to_channel_map(&spec.scan).unwrap();
    let flat: Vec<f64> = (0..s.len()).filter(|&i| v[i] > 12.0).map(|i| norm.values[i]).collect();
    let mean = flat.iter().sum::<f64>() / flat.len() as f64;
    assert!((mean - 1.0).abs() < 3.0 * 7.3e-4 / (flat.len() as f64).sqrt() + 2e-4);
    // Refitting the normalized spectrum returns a unit baseline.
    let coords: Vec<f64> = (0..s.len()).map(|i| i as f64).collect();
    let nominal: Vec<f64> = fit.peaks.iter().map(|p| p.position).collect();
    let refit = fit_profile(
        &ProfileData { coords: &coords, values: &norm.values, sigma: &norm.sigma },
        &model,
        &nominal,
        fit.linewidth,
        &FitOptions::default(),
    )
    .unwrap();
    let expect = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    for p in 0..6 {
        let sigma = refit.covariance[p][p].sqrt();
        assert!((refit.baseline[p] - expect[p]).abs() < sigma, "coef {p}: {} ± {sigma}", refit.baseline[p]);
    }
    let (flat, _) = fit_baseline_only(&coords, &vec![1.0; coords.len()], &norm.sigma).unwrap();
    assert!((flat[0] - 1.0).abs() < 1e-12 && flat[1..].iter().all(|c| c.abs() < 1e-12));
}

#[test]
fn affine_channel_reparameterization_is_equivariant() {
    let c = PhysConstants::default();
    let (spec, _) = synth(2.0, Direction::Accelerating, 1.0, 21);
    let model = build_fit_model(&default_alpha_fe_scheme(), &modulation(2.0), &spec.scan, &c).unwrap();
    let values: Vec<f64> = spec.counts.iter().map(|&c| c as f64).collect();
    let sigma: Vec<f64> = values.iter().map(|v| v.sqrt()).collect();
    let nominal: Vec<f64> = model.peaks.iter().map(|p| nominal_channel(&spec.scan, p.velocity_mm_s)).collect();
    let w0 = model.linewidth_mm_s / spec.scan.channel_width();
    let opts = FitOptions::default();
    let coords: Vec<f64> = (0..values.len()).map(|i| i as f64).collect();
    let a = fit_profile(&ProfileData { coords: &coords, values: &values, sigma: &sigma }, &model, &nominal, w0, &opts).unwrap();
    let (k, d) = (0.37, -512.0);
    let coords_t: Vec<f64> = coords.iter().map(|x| k * x + d).collect();
    let nominal_t: Vec<f64> = nominal.iter().map(|x| k * x + d).collect();
    let b = fit_profile(&ProfileData { coords: &coords_t, values: &values, sigma: &sigma }, &model, &nominal_t, k * w0, &opts)
        .unwrap();
    assert!((a.chi2_reduced - b.chi2_reduced).abs() < 1e-9 * a.chi2_reduced, "{} {}", a.chi2_reduced, b.chi2_reduced);
    for (p, q) in a.peaks.iter().zip(&b.peaks) {
        assert!((k * p.position + d - q.position).abs() < 1e-6 * k, "{} {}", k * p.position + d, q.position);
    }
    assert!((k * a.linewidth - b.linewidth).abs() < 1e-7);
}

#[test]
fn uncertainties_scale_with_duration() {
    let c = PhysConstants::default();
    let model = build_fit_model(&default_alpha_fe_scheme(), &modulation(2.0), &ScanParams::default(), &c).unwrap();
    let (short, _) = synth(2.0, Direction::Accelerating, 1.0, 31);
    let (long, _) = synth(2.0, Direction::Accelerating, 2.0, 32);
    let a = fit_spectrum(&short, &model, &FitOptions::default()).unwrap();
    let b = fit_spectrum(&long, &model, &FitOptions::default()).unwrap();
    // Relative amplitude uncertainty improves by √2.
    let ratio = (a.groups[0].amplitude_sigma / a.groups[0].amplitude) / (b.groups[0].amplitude_sigma / b.groups[0].amplitude);
    assert!((ratio / 2f64.sqrt() - 1.0).abs() < 0.1, "ratio {ratio}");
    let ratio = a.linewidth_sigma / b.linewidth_sigma;
    assert!((ratio / 2f64.sqrt() - 1.0).abs() < 0.1, "ratio {ratio}");
}

#[test]
fn tied_and_untied_amplitudes_agree() {
    let c = PhysConstants::default();
    let (spec, _) = synth(2.0, Direction::Accelerating, 1.0, 41);
    let model = build_fit_model(&default_alpha_fe_scheme(), &modulation(2.0), &spec.scan, &c).unwrap();
    let tied = fit_spectrum(&spec, &model, &FitOptions::default()).unwrap();
    let untied = fit_spectrum(&spec, &model, &FitOptions { tie_amplitudes: false, ..Default::default() }).unwrap();
    assert_eq!(untied.groups.len(), 18);
    for g in &tied.groups {
        let members: Vec<f64> = g.peaks.iter().map(|&k| untied.groups[untied.peaks[k].group].amplitude).collect();
        let mean = members.iter().sum::<f64>() / members.len() as f64;
        let sigma = g.peaks.iter().map(|&k| untied.groups[untied.peaks[k].group].amplitude_sigma).fold(0.0, f64::max);
        assert!((mean - g.amplitude).abs() < sigma, "{:?}: tied {} untied {mean} ± {sigma}", g.composition, g.amplitude);
    }
}
