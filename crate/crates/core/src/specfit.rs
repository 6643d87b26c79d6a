//! Count-spectrum fitting: polynomial baseline times a sum of shared-width
//! Lorentzian dips, with sideband-aware amplitude ties.
//!
//! Model per channel `x` with `t ∈ [−1, 1]`:
//! `B(t)·(1 − Σ_k A_{g(k)}·L(x; x_k, w))`, `L` a unit-area Lorentzian of
//! FWHM `w`. Components closer than the merge tolerance share one peak, and
//! peaks with the same (line pair, |order|) composition share one amplitude.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::floquet::ModulationModel;
use crate::lm::{self, LeastSquaresProblem, LmOptions, LmReport};
use crate::physics::{Direction, HyperfineScheme, LineClass, PhysConstants, ScanParams};
use crate::specgen::{CountSpectrum, Baseline};

/// Highest sideband order represented in the template.
pub const TEMPLATE_MAX_ORDER: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Composition {
    pub class: LineClass,
    pub order: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateComponent {
    pub line: usize,
    pub order: i32,
    pub velocity_mm_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplatePeak {
    pub velocity_mm_s: f64,
    pub components: Vec<TemplateComponent>,
    pub group: usize,
}

impl TemplatePeak {
    pub fn composition(&self) -> Vec<Composition> {
        composition_of(&self.components)
    }
}

fn composition_of(components: &[TemplateComponent]) -> Vec<Composition> {
    let mut key: Vec<Composition> = components
        .iter()
        .map(|c| Composition { class: LineClass::of_line(c.line), order: c.order.unsigned_abs() })
        .collect();
    key.sort_by_key(|k| (k.order, k.class));
    key.dedup();
    key
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeGroup {
    pub composition: Vec<Composition>,
    pub peaks: Vec<usize>,
}

/// Peak template for one spectrum half.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitModel {
    pub peaks: Vec<TemplatePeak>,
    pub groups: Vec<AmplitudeGroup>,
    pub linewidth_mm_s: f64,
    pub scan: ScanParams,
    pub centroid_mm_s: f64,
}

impl FitModel {
    /// Structural parameter count: baseline (6), amplitudes, positions, width.
    pub fn parameter_count(&self) -> usize {
        6 + self.groups.len() + self.peaks.len() + 1
    }

    /// Gives every peak its own amplitude.
    pub fn untied(&self) -> FitModel {
        let mut out = self.clone();
        out.groups = self
            .peaks
            .iter()
            .enumerate()
            .map(|(k, p)| AmplitudeGroup { composition: p.composition(), peaks: vec![k] })
            .collect();
        for (k, p) in out.peaks.iter_mut().enumerate() {
            p.group = k;
        }
        out
    }

    /// Nominal channel coordinate of a velocity under the scan's linear map.
    pub fn nominal_channel(&self, v_mm_s: f64) -> f64 {
        nominal_channel(&self.scan, v_mm_s)
    }
}

pub fn nominal_channel(scan: &ScanParams, v_mm_s: f64) -> f64 {
    let w = scan.channel_width();
    match scan.direction {
        Direction::Accelerating => (v_mm_s - scan.v_min_mm_s) / w,
        Direction::Decelerating => (scan.v_max_mm_s - v_mm_s) / w,
    }
}

/// Builds the template: sextet lines plus `|n| ≤ 2` sidebands inside the
/// scan window (orders 0 only when the drive is off), merged when closer
/// than half a linewidth.
pub fn build_fit_model(
    scheme: &HyperfineScheme,
    modulation: &ModulationModel,
    scan: &ScanParams,
    c: &PhysConstants,
) -> Result<FitModel> {
    scheme.validate()?;
    scan.validate()?;
    let linewidth = modulation.linewidth_mm_s(c);
    if !(linewidth > 0.0 && linewidth.is_finite()) {
        return Err(Error::Config("linewidth must be positive".into()));
    }
    let spacing = modulation.sideband_spacing_mm_s(c);
    let max_order = if modulation.mod_index > 0.0 { TEMPLATE_MAX_ORDER } else { 0 };
    let mut comps = Vec::new();
    for (line, &v) in scheme.line_velocities_mm_s.iter().enumerate() {
        for order in -max_order..=max_order {
            let vel = v + order as f64 * spacing;
            if vel > scan.v_min_mm_s && vel < scan.v_max_mm_s {
                comps.push(TemplateComponent { line, order, velocity_mm_s: vel });
            }
        }
    }
    comps.sort_by(|a, b| a.velocity_mm_s.total_cmp(&b.velocity_mm_s));
    let tolerance = 0.5 * linewidth;
    let mut clusters: Vec<Vec<TemplateComponent>> = Vec::new();
    for comp in comps {
        match clusters.last_mut() {
            Some(cl) if comp.velocity_mm_s - cl.last().unwrap().velocity_mm_s <= tolerance => cl.push(comp),
            _ => clusters.push(vec![comp]),
        }
    }
    let mut by_key: BTreeMap<Vec<Composition>, Vec<usize>> = BTreeMap::new();
    let mut peaks = Vec::with_capacity(clusters.len());
    for (k, cl) in clusters.into_iter().enumerate() {
        let v = cl.iter().map(|c| c.velocity_mm_s).sum::<f64>() / cl.len() as f64;
        by_key.entry(composition_of(&cl)).or_default().push(k);
        peaks.push(TemplatePeak { velocity_mm_s: v, components: cl, group: 0 });
    }
    let groups: Vec<AmplitudeGroup> =
        by_key.into_iter().map(|(composition, peaks)| AmplitudeGroup { composition, peaks }).collect();
    for (g, group) in groups.iter().enumerate() {
        for &k in &group.peaks {
            peaks[k].group = g;
        }
    }
    Ok(FitModel { peaks, groups, linewidth_mm_s: linewidth, scan: *scan, centroid_mm_s: scheme.centroid() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub tie_amplitudes: bool,
    /// Half-width of the registration scale search (fractional).
    pub registration_scale_span: f64,
    pub registration_scale_steps: usize,
    /// Half-width of the registration shift search, in channels.
    pub registration_shift_span_channels: f64,
    pub registration_shift_steps: usize,
    /// Peaks get free positions when their group amplitude exceeds this many σ.
    pub free_position_significance: f64,
    pub lm: LmOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tie_amplitudes: true,
            registration_scale_span: 0.03,
            registration_scale_steps: 13,
            registration_shift_span_channels: 12.0,
            registration_shift_steps: 13,
            free_position_significance: 5.0,
            lm: LmOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunsTest {
    pub n_positive: usize,
    pub n_negative: usize,
    pub runs: usize,
    pub expected_runs: f64,
    pub z: f64,
    /// Two-sided normal-approximation p-value.
    pub p_value: f64,
}

impl RunsTest {
    pub fn passes(&self, level: f64) -> bool {
        self.p_value >= level
    }
}

/// Wald–Wolfowitz runs test on the signs of `residuals` (zeros skipped).
pub fn runs_test(residuals: &[f64]) -> RunsTest {
    let signs: Vec<bool> = residuals.iter().filter(|r| **r != 0.0).map(|r| *r > 0.0).collect();
    let n_pos = signs.iter().filter(|s| **s).count();
    let n_neg = signs.len() - n_pos;
    let runs = if signs.is_empty() { 0 } else { 1 + signs.windows(2).filter(|w| w[0] != w[1]).count() };
    let n = (n_pos + n_neg) as f64;
    let (np, nn) = (n_pos as f64, n_neg as f64);
    let expected = 2.0 * np * nn / n + 1.0;
    let var = 2.0 * np * nn * (2.0 * np * nn - n) / (n * n * (n - 1.0));
    let z = if var > 0.0 { (runs as f64 - expected) / var.sqrt() } else { 0.0 };
    RunsTest {
        n_positive: n_pos,
        n_negative: n_neg,
        runs,
        expected_runs: expected,
        z,
        p_value: erfc(z.abs() / std::f64::consts::SQRT_2),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedPeak {
    pub template_velocity_mm_s: f64,
    pub composition: Vec<Composition>,
    pub group: usize,
    pub position: f64,
    pub position_sigma: f64,
    /// Whether the position was a free parameter in the final stage.
    pub free: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupFit {
    pub composition: Vec<Composition>,
    /// Lorentzian area relative to the baseline, in channel units.
    pub amplitude: f64,
    pub amplitude_sigma: f64,
    pub peaks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumFit {
    pub direction: Direction,
    pub drive_power_w: f64,
    /// Scan of the fitted spectrum; absent for fits on arbitrary coordinates.
    pub scan: Option<ScanParams>,
    /// Coefficients of `t^0 ..= t^5`, counts.
    pub baseline: [f64; 6],
    /// Channel coordinates that map to `t = −1` and `t = +1`.
    pub coord_range: [f64; 2],
    pub peaks: Vec<FittedPeak>,
    pub groups: Vec<GroupFit>,
    /// FWHM in channel units.
    pub linewidth: f64,
    pub linewidth_sigma: f64,
    pub parameter_names: Vec<String>,
    pub covariance: Vec<Vec<f64>>,
    pub chi2: f64,
    pub dof: usize,
    pub chi2_reduced: f64,
    pub residuals: Vec<f64>,
    pub runs_test: RunsTest,
    pub converged: bool,
    pub singular: bool,
    pub condition: f64,
    pub iterations: usize,
    pub registration: [f64; 2],
}

impl SpectrumFit {
    pub fn baseline_at(&self, coord: f64) -> f64 {
        Baseline(self.baseline).eval(to_t(coord, self.coord_range))
    }

    pub fn parameter_count(&self) -> usize {
        6 + self.groups.len() + self.peaks.len() + 1
    }

    pub fn free_parameter_count(&self) -> usize {
        self.parameter_names.len()
    }

    /// Highest sideband order present in the template.
    pub fn max_order(&self) -> u32 {
        self.peaks.iter().flat_map(|p| p.composition.iter().map(|c| c.order)).max().unwrap_or(0)
    }
}

fn to_t(x: f64, range: [f64; 2]) -> f64 {
    2.0 * (x - range[0]) / (range[1] - range[0]) - 1.0
}

fn lorentz(u: f64, w: f64) -> f64 {
    let h = 0.5 * w;
    h / (PI * (u * u + h * h))
}

/// Data plus peak bookkeeping shared by every stage.
struct Profile<'a> {
    x: &'a [f64],
    t: Vec<f64>,
    y: &'a [f64],
    inv_sigma: Vec<f64>,
    peak_group: Vec<usize>,
    n_groups: usize,
}

/// Model values and partial derivatives with respect to every peak
/// quantity (before any stage-specific reparameterization).
struct Partials {
    model: Vec<f64>,
    d_base: DMatrix<f64>,
    d_amp: DMatrix<f64>,
    d_width: Vec<f64>,
    d_pos: DMatrix<f64>,
}

impl Profile<'_> {
    fn model(&self, base: &[f64], amps: &[f64], width: f64, pos: &[f64]) -> Vec<f64> {
        self.x
            .iter()
            .zip(&self.t)
            .map(|(&x, &t)| {
                let absorb: f64 =
                    pos.iter().zip(&self.peak_group).map(|(&p, &g)| amps[g] * lorentz(x - p, width)).sum();
                Baseline(base6(base)).eval(t) * (1.0 - absorb)
            })
            .collect()
    }

    fn partials(&self, base: &[f64], amps: &[f64], width: f64, pos: &[f64]) -> Partials {
        let n = self.x.len();
        let k = pos.len();
        let mut out = Partials {
            model: vec![0.0; n],
            d_base: DMatrix::zeros(n, 6),
            d_amp: DMatrix::zeros(n, self.n_groups),
            d_width: vec![0.0; n],
            d_pos: DMatrix::zeros(n, k),
        };
        let h = 0.5 * width;
        for i in 0..n {
            let x = self.x[i];
            let t = self.t[i];
            let b = Baseline(base6(base)).eval(t);
            let mut absorb = 0.0;
            let mut d_w = 0.0;
            for j in 0..k {
                let g = self.peak_group[j];
                let u = x - pos[j];
                let q = u * u + h * h;
                let l = h / (PI * q);
                absorb += amps[g] * l;
                out.d_amp[(i, g)] -= b * l;
                // ∂L/∂x_k = 2uh/(πq²); ∂L/∂w = (u² − h²)/(2πq²)
                out.d_pos[(i, j)] = -b * amps[g] * 2.0 * u * h / (PI * q * q);
                d_w += amps[g] * (u * u - h * h) / (2.0 * PI * q * q);
            }
            let shape = 1.0 - absorb;
            let mut tp = 1.0;
            for p in 0..6 {
                out.d_base[(i, p)] = tp * shape;
                tp *= t;
            }
            out.d_width[i] = -b * d_w;
            out.model[i] = b * shape;
        }
        out
    }

    fn residuals(&self, model: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.y.len(), self.y.iter().zip(model).zip(&self.inv_sigma).map(|((y, m), s)| (y - m) * s))
    }

    /// Scales model derivatives into residual Jacobian rows.
    fn whiten(&self, mut j: DMatrix<f64>) -> DMatrix<f64> {
        for (i, s) in self.inv_sigma.iter().enumerate() {
            for c in 0..j.ncols() {
                j[(i, c)] *= -s;
            }
        }
        j
    }
}

fn base6(b: &[f64]) -> [f64; 6] {
    [b[0], b[1], b[2], b[3], b[4], b[5]]
}

/// Stage A: positions tied to the template through one affine map.
/// Parameters: baseline (6), amplitudes (G), width, scale, shift.
struct AffineStage<'a> {
    profile: &'a Profile<'a>,
    nominal: &'a [f64],
    center: f64,
    min_width: f64,
}

impl AffineStage<'_> {
    fn unpack<'p>(&self, p: &'p DVector<f64>) -> (&'p [f64], &'p [f64], f64, Vec<f64>) {
        let g = self.profile.n_groups;
        let s = p.as_slice();
        let (scale, shift) = (s[7 + g], s[8 + g]);
        let pos = self.nominal.iter().map(|n| self.center + scale * (n - self.center) + shift).collect();
        (&s[..6], &s[6..6 + g], s[6 + g], pos)
    }
}

impl LeastSquaresProblem for AffineStage<'_> {
    fn n_params(&self) -> usize {
        9 + self.profile.n_groups
    }

    fn residuals(&self, p: &DVector<f64>) -> Result<DVector<f64>> {
        let (b, a, w, pos) = self.unpack(p);
        Ok(self.profile.residuals(&self.profile.model(b, a, w, &pos)))
    }

    fn jacobian(&self, p: &DVector<f64>) -> Result<DMatrix<f64>> {
        let (b, a, w, pos) = self.unpack(p);
        let parts = self.profile.partials(b, a, w, &pos);
        let n = parts.model.len();
        let g = self.profile.n_groups;
        let mut j = DMatrix::zeros(n, self.n_params());
        j.view_mut((0, 0), (n, 6)).copy_from(&parts.d_base);
        j.view_mut((0, 6), (n, g)).copy_from(&parts.d_amp);
        for i in 0..n {
            j[(i, 6 + g)] = parts.d_width[i];
            let mut ds = 0.0;
            let mut dd = 0.0;
            for (k, nom) in self.nominal.iter().enumerate() {
                ds += parts.d_pos[(i, k)] * (nom - self.center);
                dd += parts.d_pos[(i, k)];
            }
            j[(i, 7 + g)] = ds;
            j[(i, 8 + g)] = dd;
        }
        Ok(self.profile.whiten(j))
    }

    fn project(&self, p: &mut DVector<f64>) {
        let g = self.profile.n_groups;
        for v in p.rows_mut(6, g).iter_mut() {
            *v = v.max(0.0);
        }
        p[6 + g] = p[6 + g].max(self.min_width);
    }
}

/// Stage B: free positions for the listed peaks, the rest held fixed.
/// Parameters: baseline (6), amplitudes (G), width, free positions.
struct FreeStage<'a> {
    profile: &'a Profile<'a>,
    fixed_pos: Vec<f64>,
    free: Vec<usize>,
    min_width: f64,
}

impl FreeStage<'_> {
    fn unpack<'p>(&self, p: &'p DVector<f64>) -> (&'p [f64], &'p [f64], f64, Vec<f64>) {
        let g = self.profile.n_groups;
        let s = p.as_slice();
        let mut pos = self.fixed_pos.clone();
        for (j, &k) in self.free.iter().enumerate() {
            pos[k] = s[7 + g + j];
        }
        (&s[..6], &s[6..6 + g], s[6 + g], pos)
    }
}

impl LeastSquaresProblem for FreeStage<'_> {
    fn n_params(&self) -> usize {
        7 + self.profile.n_groups + self.free.len()
    }

    fn residuals(&self, p: &DVector<f64>) -> Result<DVector<f64>> {
        let (b, a, w, pos) = self.unpack(p);
        Ok(self.profile.residuals(&self.profile.model(b, a, w, &pos)))
    }

    fn jacobian(&self, p: &DVector<f64>) -> Result<DMatrix<f64>> {
        let (b, a, w, pos) = self.unpack(p);
        let parts = self.profile.partials(b, a, w, &pos);
        let n = parts.model.len();
        let g = self.profile.n_groups;
        let mut j = DMatrix::zeros(n, self.n_params());
        j.view_mut((0, 0), (n, 6)).copy_from(&parts.d_base);
        j.view_mut((0, 6), (n, g)).copy_from(&parts.d_amp);
        for i in 0..n {
            j[(i, 6 + g)] = parts.d_width[i];
        }
        for (jj, &k) in self.free.iter().enumerate() {
            j.set_column(7 + g + jj, &parts.d_pos.column(k));
        }
        Ok(self.profile.whiten(j))
    }

    fn project(&self, p: &mut DVector<f64>) {
        let g = self.profile.n_groups;
        for v in p.rows_mut(6, g).iter_mut() {
            *v = v.max(0.0);
        }
        p[6 + g] = p[6 + g].max(self.min_width);
    }
}

/// Input to the low-level fit: arbitrary channel coordinates and values
/// with their standard deviations.
pub struct ProfileData<'a> {
    pub coords: &'a [f64],
    pub values: &'a [f64],
    pub sigma: &'a [f64],
}

/// Fits a count spectrum against a template from [`build_fit_model`].
pub fn fit_spectrum(spectrum: &CountSpectrum, model: &FitModel, opts: &FitOptions) -> Result<SpectrumFit> {
    spectrum.validate()?;
    if spectrum.scan.n_channels != model.scan.n_channels {
        return Err(Error::InvalidInput("spectrum and template disagree on channel count".into()));
    }
    let scan = spectrum.scan;
    let positive = spectrum.counts.iter().filter(|c| **c > 0).count();
    if positive * 10 < spectrum.counts.len() * 9 {
        return Err(Error::InvalidInput("fewer than 90% of channels have counts; Poisson weights undefined".into()));
    }
    let coords: Vec<f64> = spectrum.channels.iter().map(|&c| c as f64).collect();
    let values: Vec<f64> = spectrum.counts.iter().map(|&c| c as f64).collect();
    let sigma: Vec<f64> = values.iter().map(|v| v.max(1.0).sqrt()).collect();
    let nominal: Vec<f64> = model.peaks.iter().map(|p| nominal_channel(&scan, p.velocity_mm_s)).collect();
    let width0 = model.linewidth_mm_s / scan.channel_width();
    let model = if opts.tie_amplitudes { model.clone() } else { model.untied() };
    let mut fit = fit_profile(&ProfileData { coords: &coords, values: &values, sigma: &sigma }, &model, &nominal, width0, opts)?;
    fit.direction = scan.direction;
    fit.scan = Some(scan);
    fit.drive_power_w = spectrum.drive_power_w;
    Ok(fit)
}

/// Fits values on arbitrary channel coordinates. `nominal` gives the
/// template peak positions and `width0` the starting FWHM, both in the same
/// coordinates.
pub fn fit_profile(
    data: &ProfileData,
    model: &FitModel,
    nominal: &[f64],
    width0: f64,
    opts: &FitOptions,
) -> Result<SpectrumFit> {
    let n = data.coords.len();
    if n < 16 || data.values.len() != n || data.sigma.len() != n {
        return Err(Error::InvalidInput(format!("profile needs ≥ 16 equal-length points, got {n}")));
    }
    if nominal.len() != model.peaks.len() {
        return Err(Error::InvalidInput("nominal positions do not match the template".into()));
    }
    if data.sigma.iter().any(|s| !(s.is_finite() && *s > 0.0)) || data.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("values must be finite with positive σ".into()));
    }
    let coord_range = [data.coords[0], data.coords[n - 1]];
    let pitch = (data.coords[1] - data.coords[0]).abs();
    if !(pitch > 0.0) || coord_range[0] == coord_range[1] {
        return Err(Error::InvalidInput("channel coordinates must be distinct".into()));
    }
    let profile = Profile {
        x: data.coords,
        t: data.coords.iter().map(|&x| to_t(x, coord_range)).collect(),
        y: data.values,
        inv_sigma: data.sigma.iter().map(|s| 1.0 / s).collect(),
        peak_group: model.peaks.iter().map(|p| p.group).collect(),
        n_groups: model.groups.len(),
    };
    let g = profile.n_groups;
    let center = 0.5 * (coord_range[0] + coord_range[1]);
    let min_width = 0.1 * pitch;

    let (scale, shift, base, amps) = register(&profile, nominal, center, width0, pitch, opts)?;

    let affine = AffineStage { profile: &profile, nominal, center, min_width };
    let mut start = Vec::with_capacity(affine.n_params());
    start.extend_from_slice(&base);
    start.extend_from_slice(&amps);
    start.extend_from_slice(&[width0, scale, shift]);
    let rep_a = lm::minimize(&affine, DVector::from_vec(start), &opts.lm)?;
    let (_, _, _, pos_a) = affine.unpack(&rep_a.params);
    let se_a = rep_a.std_errors();

    let free: Vec<usize> = (0..model.peaks.len())
        .filter(|&k| {
            let gi = model.peaks[k].group;
            let a = rep_a.params[6 + gi];
            a > opts.free_position_significance * se_a[6 + gi] && a > 0.0
        })
        .collect();
    let stage_b = FreeStage { profile: &profile, fixed_pos: pos_a.clone(), free: free.clone(), min_width };
    let mut start: Vec<f64> = rep_a.params.as_slice()[..7 + g].to_vec();
    start.extend(free.iter().map(|&k| pos_a[k]));
    let rep_b = lm::minimize(&stage_b, DVector::from_vec(start), &opts.lm)?;
    let (b, a, w, pos) = stage_b.unpack(&rep_b.params);
    let (b, a) = (base6(b), a.to_vec());

    let model_vals = profile.model(&b, &a, w, &pos);
    let residuals: Vec<f64> = profile.residuals(&model_vals).iter().copied().collect();
    let se_b = rep_b.std_errors();

    // Positions held fixed inherit the affine-map uncertainty of stage A.
    let cov_a = &rep_a.covariance;
    let (is, id) = (7 + g, 8 + g);
    let mut peaks = Vec::with_capacity(model.peaks.len());
    for (k, tp) in model.peaks.iter().enumerate() {
        let (sigma, is_free) = match free.iter().position(|&f| f == k) {
            Some(j) => (se_b[7 + g + j], true),
            None => {
                let dn = nominal[k] - center;
                let var = dn * dn * cov_a[(is, is)] + cov_a[(id, id)] + 2.0 * dn * cov_a[(is, id)];
                (var.max(0.0).sqrt(), false)
            }
        };
        peaks.push(FittedPeak {
            template_velocity_mm_s: tp.velocity_mm_s,
            composition: tp.composition(),
            group: tp.group,
            position: pos[k],
            position_sigma: sigma,
            free: is_free,
        });
    }
    let groups = model
        .groups
        .iter()
        .enumerate()
        .map(|(gi, grp)| GroupFit {
            composition: grp.composition.clone(),
            amplitude: a[gi],
            amplitude_sigma: se_b[6 + gi],
            peaks: grp.peaks.clone(),
        })
        .collect();
    let mut names: Vec<String> = (0..6).map(|p| format!("baseline_t{p}")).collect();
    names.extend((0..g).map(|gi| format!("amplitude_{gi}")));
    names.push("linewidth".into());
    names.extend(free.iter().map(|k| format!("position_{k}")));

    Ok(build_report(
        rep_b,
        b,
        coord_range,
        peaks,
        groups,
        w,
        se_b[6 + g],
        names,
        residuals,
        [scale, shift],
    ))
}

#[allow(clippy::too_many_arguments)]
fn build_report(
    rep: LmReport,
    baseline: [f64; 6],
    coord_range: [f64; 2],
    peaks: Vec<FittedPeak>,
    groups: Vec<GroupFit>,
    linewidth: f64,
    linewidth_sigma: f64,
    parameter_names: Vec<String>,
    residuals: Vec<f64>,
    registration: [f64; 2],
) -> SpectrumFit {
    let covariance = (0..rep.covariance.nrows()).map(|i| rep.covariance.row(i).iter().copied().collect()).collect();
    SpectrumFit {
        direction: Direction::Accelerating,
        drive_power_w: 0.0,
        scan: None,
        baseline,
        coord_range,
        peaks,
        groups,
        linewidth,
        linewidth_sigma,
        parameter_names,
        covariance,
        chi2: rep.chi2,
        dof: rep.dof(),
        chi2_reduced: rep.chi2_reduced(),
        runs_test: runs_test(&residuals),
        residuals,
        converged: rep.converged,
        singular: rep.singular,
        condition: rep.condition,
        iterations: rep.iterations,
        registration,
    }
}

/// Grid search over the template's scale and shift, solving the linearized
/// model `Σ b_p t^p − Σ_g c_g Σ_{k∈g} L_k` at each node. Returns the best
/// (scale, shift, baseline, amplitudes).
fn register(
    profile: &Profile,
    nominal: &[f64],
    center: f64,
    width: f64,
    pitch: f64,
    opts: &FitOptions,
) -> Result<(f64, f64, Vec<f64>, Vec<f64>)> {
    let grid = |span: f64, steps: usize| -> Vec<f64> {
        if steps < 2 {
            return vec![0.0];
        }
        (0..steps).map(|i| -span + 2.0 * span * i as f64 / (steps - 1) as f64).collect()
    };
    let scales = grid(opts.registration_scale_span, opts.registration_scale_steps);
    let shifts = grid(opts.registration_shift_span_channels, opts.registration_shift_steps);
    let g = profile.n_groups;
    let n = profile.x.len();
    let mut best: Option<(f64, f64, f64, DVector<f64>)> = None;
    for &ds in &scales {
        for &dd in &shifts {
            let scale = 1.0 + ds;
            let shift = dd * pitch;
            let mut design = DMatrix::zeros(n, 6 + g);
            let mut rhs = DVector::zeros(n);
            for i in 0..n {
                let w = profile.inv_sigma[i];
                let mut tp = 1.0;
                for p in 0..6 {
                    design[(i, p)] = tp * w;
                    tp *= profile.t[i];
                }
                for (k, nom) in nominal.iter().enumerate() {
                    let pos = center + scale * (nom - center) + shift;
                    design[(i, 6 + profile.peak_group[k])] -= lorentz(profile.x[i] - pos, width) * w;
                }
                rhs[i] = profile.y[i] * w;
            }
            let ata = design.tr_mul(&design);
            let atb = design.tr_mul(&rhs);
            let Some(coef) = ata.clone().cholesky().map(|c| c.solve(&atb)) else { continue };
            let chi2 = (&design * &coef - &rhs).norm_squared();
            if best.as_ref().is_none_or(|b| chi2 < b.0) {
                best = Some((chi2, scale, shift, coef));
            }
        }
    }
    let (_, scale, shift, coef) = best.ok_or_else(|| Error::Singular("registration design is singular".into()))?;
    let base: Vec<f64> = coef.rows(0, 6).iter().copied().collect();
    let level = base[0].abs().max(f64::MIN_POSITIVE);
    let amps = coef.rows(6, g).iter().map(|c| (c / level).max(0.0)).collect();
    Ok((scale, shift, base, amps))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedSpectrum {
    pub direction: Direction,
    pub drive_power_w: f64,
    pub channels: Vec<usize>,
    pub values: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Counts divided by the fitted baseline; dips sit below 1.
pub fn normalize_by_baseline(spectrum: &CountSpectrum, fit: &SpectrumFit) -> Result<NormalizedSpectrum> {
    spectrum.validate()?;
    let mut values = Vec::with_capacity(spectrum.counts.len());
    let mut sigma = Vec::with_capacity(spectrum.counts.len());
    for (&ch, &c) in spectrum.channels.iter().zip(&spectrum.counts) {
        let b = fit.baseline_at(ch as f64);
        if !(b > 0.0) {
            return Err(Error::InvalidInput(format!("fitted baseline is non-positive at channel {ch}")));
        }
        values.push(c as f64 / b);
        sigma.push((c as f64).max(1.0).sqrt() / b);
    }
    Ok(NormalizedSpectrum {
        direction: spectrum.scan.direction,
        drive_power_w: spectrum.drive_power_w,
        channels: spectrum.channels.clone(),
        values,
        sigma,
    })
}

/// Weighted least-squares fit of the polynomial baseline alone.
pub fn fit_baseline_only(coords: &[f64], values: &[f64], sigma: &[f64]) -> Result<([f64; 6], [f64; 6])> {
    let n = coords.len();
    if n < 6 || values.len() != n || sigma.len() != n {
        return Err(Error::InvalidInput("baseline fit needs ≥ 6 equal-length points".into()));
    }
    let range = [coords[0], coords[n - 1]];
    let mut design = DMatrix::zeros(n, 6);
    let mut rhs = DVector::zeros(n);
    for i in 0..n {
        let t = to_t(coords[i], range);
        let mut tp = 1.0;
        for p in 0..6 {
            design[(i, p)] = tp / sigma[i];
            tp *= t;
        }
        rhs[i] = values[i] / sigma[i];
    }
    let ata = design.tr_mul(&design);
    let (inv, _) = lm::pseudo_inverse(&ata);
    let coef = &inv * design.tr_mul(&rhs);
    let mut c = [0.0; 6];
    let mut s = [0.0; 6];
    for p in 0..6 {
        c[p] = coef[p];
        s[p] = inv[(p, p)].max(0.0).sqrt();
    }
    Ok((c, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{self, default_alpha_fe_scheme};

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

    #[test]
    fn zero_drive_template() {
        let c = PhysConstants::default();
        let m = build_fit_model(&default_alpha_fe_scheme(), &modulation(0.0), &ScanParams::default(), &c).unwrap();
        assert_eq!(m.peaks.len(), 6);
        assert_eq!(m.groups.len(), 3);
        assert_eq!(m.parameter_count(), 6 + 3 + 6 + 1);
    }

    #[test]
    fn full_drive_template() {
        let c = PhysConstants::default();
        let m = build_fit_model(&default_alpha_fe_scheme(), &modulation(2.0), &ScanParams::default(), &c).unwrap();
        assert_eq!(m.peaks.len(), 18);
        assert_eq!(m.groups.len(), 7);
        assert_eq!(m.parameter_count(), 32);
        let merged = m.peaks.iter().filter(|p| p.components.len() == 2).count();
        assert_eq!(merged, 8);
        for g in &m.groups {
            assert!(g.peaks.len() == 2 || g.peaks.len() == 4);
        }
        assert_eq!(m.untied().groups.len(), 18);
    }

    #[test]
    fn runs_test_extremes() {
        let alternating: Vec<f64> = (0..200).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert!(runs_test(&alternating).p_value < 1e-6);
        let blocks: Vec<f64> = (0..200).map(|i| if i < 100 { 1.0 } else { -1.0 }).collect();
        let r = runs_test(&blocks);
        assert_eq!(r.runs, 2);
        assert!(r.p_value < 1e-6);
        assert!((r.expected_runs - 101.0).abs() < 1e-12);
    }

    #[test]
    fn lorentzian_has_unit_area() {
        let w = 3.0;
        let h = 0.01;
        let area: f64 = (-200_000..=200_000).map(|i| lorentz(i as f64 * h, w) * h).sum();
        // Tails beyond ±2000 hold w/(π·2000) of the area.
        assert!((area - 1.0 + w / (PI * 2000.0)).abs() < 1e-6);
    }

    #[test]
    fn partials_match_finite_differences() {
        let x: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let y = vec![100.0; 40];
        let s = vec![10.0; 40];
        let profile = Profile {
            t: x.iter().map(|&v| to_t(v, [0.0, 39.0])).collect(),
            x: &x,
            y: &y,
            inv_sigma: s.iter().map(|v| 1.0 / v).collect(),
            peak_group: vec![0, 1, 0],
            n_groups: 2,
        };
        let base = [100.0, 2.0, -1.0, 0.5, 0.2, -0.1];
        let amps = [1.5, 0.7];
        let pos = [10.0, 20.3, 29.0];
        let w = 4.0;
        let p = profile.partials(&base, &amps, w, &pos);
        let h = 1e-6;
        for k in 0..3 {
            let mut up = pos;
            up[k] += h;
            let mut dn = pos;
            dn[k] -= h;
            let mu = profile.model(&base, &amps, w, &up);
            let md = profile.model(&base, &amps, w, &dn);
            for i in 0..40 {
                let fd = (mu[i] - md[i]) / (2.0 * h);
                assert!((fd - p.d_pos[(i, k)]).abs() < 1e-5 * (1.0 + fd.abs()));
            }
        }
        let mu = profile.model(&base, &amps, w + h, &pos);
        let md = profile.model(&base, &amps, w - h, &pos);
        for i in 0..40 {
            let fd = (mu[i] - md[i]) / (2.0 * h);
            assert!((fd - p.d_width[i]).abs() < 1e-5 * (1.0 + fd.abs()));
        }
        for g in 0..2 {
            let mut up = amps;
            up[g] += h;
            let mut dn = amps;
            dn[g] -= h;
            let mu = profile.model(&base, &up, w, &pos);
            let md = profile.model(&base, &dn, w, &pos);
            for i in 0..40 {
                let fd = (mu[i] - md[i]) / (2.0 * h);
                assert!((fd - p.d_amp[(i, g)]).abs() < 1e-5 * (1.0 + fd.abs()));
            }
        }
    }
}
