//! Global fit of sideband powers against drive power.
//!
//! With `x = √P_in`, every order at every power is modelled as
//! `N·P_n(m·x, α)`. `N` is one shared normalization; it absorbs the window
//! fraction left in the extracted powers. Residuals are whitened with the
//! full per-power covariance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::SidebandPowers;
use crate::floquet::{sideband_power, sideband_power_jet, sideband_powers};
use crate::lm::{minimize, LeastSquaresProblem, LmOptions};

/// `P_n(m·x, α)`.
pub fn model_prediction(n: i32, x: f64, m: f64, alpha: f64) -> Result<f64> {
    if !(x >= 0.0) || !(m >= 0.0) {
        return Err(Error::Domain(format!("model needs x ≥ 0 and m ≥ 0, got x = {x}, m = {m}")));
    }
    sideband_power(n, m * x, alpha)
}

/// `(P_n, ∂P_n/∂m, ∂P_n/∂α)` at `(x, m, α)`.
pub fn model_jacobian(n: u32, x: f64, m: f64, alpha: f64) -> Result<(f64, f64, f64)> {
    let jet = sideband_power_jet(n as usize, m * x, alpha)?;
    let k = n as usize;
    Ok((jet.value[k], x * jet.d_m0[k], jet.d_alpha[k]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalFitConfig {
    pub orders: Vec<u32>,
    pub fit_alpha: bool,
    /// Value used when `fit_alpha` is off.
    pub alpha_fixed: f64,
    /// Upper end of the smooth α transform.
    pub alpha_max: f64,
    pub float_normalization: bool,
    /// Value used when the normalization is fixed.
    pub normalization: f64,
    /// Optimize `ln m` instead of `m`.
    pub log_m: bool,
    /// Start-grid range for `m` (per √W).
    pub m_grid: [f64; 2],
    pub m_grid_steps: usize,
    pub alpha_grid_steps: usize,
    /// α closer than this to either end is reported as pinned.
    pub boundary_margin: f64,
    pub lm: LmOptions,
}

impl Default for GlobalFitConfig {
    fn default() -> Self {
        Self {
            orders: vec![0, 1, 2],
            fit_alpha: true,
            alpha_fixed: 0.0,
            alpha_max: 0.95,
            float_normalization: true,
            normalization: 1.0,
            log_m: false,
            m_grid: [0.2, 30.0],
            m_grid_steps: 60,
            alpha_grid_steps: 10,
            boundary_margin: 0.01,
            lm: LmOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResidual {
    pub drive_power_w: f64,
    pub order: u32,
    pub observed: f64,
    pub sigma: f64,
    pub model: f64,
    /// `(observed − model)/σ`, ignoring correlations.
    pub pull: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalFitResult {
    pub m: f64,
    pub m_uncertainty: f64,
    pub alpha: f64,
    pub alpha_uncertainty: f64,
    pub normalization: f64,
    pub normalization_uncertainty: f64,
    /// Names of the floated parameters, matching `covariance`.
    pub parameter_names: Vec<String>,
    pub covariance: Vec<Vec<f64>>,
    pub chi2: f64,
    pub dof: usize,
    pub chi2_reduced: f64,
    pub alpha_at_boundary: bool,
    pub converged: bool,
    pub iterations: usize,
    pub residuals: Vec<PointResidual>,
}

impl GlobalFitResult {
    pub fn predict(&self, n: i32, drive_power_w: f64) -> Result<f64> {
        Ok(self.normalization * model_prediction(n, drive_power_w.max(0.0).sqrt(), self.m, self.alpha)?)
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    fit_alpha: bool,
    float_n: bool,
    log_m: bool,
    alpha_max: f64,
    alpha_fixed: f64,
    n_fixed: f64,
}

impl Layout {
    fn len(&self) -> usize {
        1 + self.fit_alpha as usize + self.float_n as usize
    }

    /// Natural values and the derivatives of each with respect to its
    /// internal parameter.
    fn unpack(&self, p: &DVector<f64>) -> ([f64; 3], [f64; 3]) {
        let (m, dm) = if self.log_m { (p[0].exp(), p[0].exp()) } else { (p[0], 1.0) };
        let mut k = 1;
        let (alpha, da) = if self.fit_alpha {
            let s = 1.0 / (1.0 + (-p[k]).exp());
            k += 1;
            (self.alpha_max * s, self.alpha_max * s * (1.0 - s))
        } else {
            (self.alpha_fixed, 0.0)
        };
        let n = if self.float_n { p[k] } else { self.n_fixed };
        ([m, alpha, n], [dm, da, 1.0])
    }

    fn pack(&self, m: f64, alpha: f64, n: f64) -> DVector<f64> {
        let mut v = vec![if self.log_m { m.ln() } else { m }];
        if self.fit_alpha {
            let s = (alpha / self.alpha_max).clamp(1e-9, 1.0 - 1e-9);
            v.push((s / (1.0 - s)).ln());
        }
        if self.float_n {
            v.push(n);
        }
        DVector::from_vec(v)
    }
}

struct Point {
    x: f64,
    drive_power_w: f64,
    observed: DVector<f64>,
    /// Inverse Cholesky factor of the order sub-block of the covariance.
    whiten: DMatrix<f64>,
    sigma: Vec<f64>,
}

struct GlobalProblem {
    points: Vec<Point>,
    orders: Vec<u32>,
    layout: Layout,
}

impl GlobalProblem {
    fn max_order(&self) -> usize {
        *self.orders.iter().max().unwrap() as usize
    }

    fn raw_model(&self, x: f64, m: f64, alpha: f64) -> Result<Vec<f64>> {
        let p = sideband_powers(self.max_order(), m * x, alpha)?;
        Ok(self.orders.iter().map(|&n| p[n as usize]).collect())
    }
}

impl LeastSquaresProblem for GlobalProblem {
    fn n_params(&self) -> usize {
        self.layout.len()
    }

    fn residuals(&self, params: &DVector<f64>) -> Result<DVector<f64>> {
        let ([m, alpha, n], _) = self.layout.unpack(params);
        let k = self.orders.len();
        let mut out = DVector::zeros(self.points.len() * k);
        for (i, pt) in self.points.iter().enumerate() {
            let model = DVector::from_vec(self.raw_model(pt.x, m, alpha)?) * n;
            out.rows_mut(i * k, k).copy_from(&(&pt.whiten * (&pt.observed - model)));
        }
        Ok(out)
    }

    fn jacobian(&self, params: &DVector<f64>) -> Result<DMatrix<f64>> {
        let ([m, alpha, n], [dm, da, _]) = self.layout.unpack(params);
        let k = self.orders.len();
        let np = self.layout.len();
        let mut jac = DMatrix::zeros(self.points.len() * k, np);
        for (i, pt) in self.points.iter().enumerate() {
            let jet = sideband_power_jet(self.max_order(), m * pt.x, alpha)?;
            let mut raw = DMatrix::zeros(k, np);
            for (r, &ord) in self.orders.iter().enumerate() {
                let o = ord as usize;
                let mut c = 0;
                raw[(r, c)] = -n * pt.x * jet.d_m0[o] * dm;
                c += 1;
                if self.layout.fit_alpha {
                    raw[(r, c)] = -n * jet.d_alpha[o] * da;
                    c += 1;
                }
                if self.layout.float_n {
                    raw[(r, c)] = -jet.value[o];
                }
            }
            jac.rows_mut(i * k, k).copy_from(&(&pt.whiten * raw));
        }
        Ok(jac)
    }

    fn project(&self, params: &mut DVector<f64>) {
        if !self.layout.log_m {
            params[0] = params[0].max(1e-9);
        }
    }
}

fn build_points(data: &[SidebandPowers], orders: &[u32]) -> Result<Vec<Point>> {
    data.iter()
        .map(|d| {
            if !(d.drive_power_w >= 0.0) {
                return Err(Error::InvalidInput(format!("drive power must be ≥ 0, got {}", d.drive_power_w)));
            }
            let k = orders.len();
            let cov = DMatrix::from_fn(k, k, |i, j| d.covariance[orders[i] as usize][orders[j] as usize]);
            let chol = cov.clone().cholesky().ok_or_else(|| {
                Error::InvalidInput(format!("covariance at {} W is not positive definite", d.drive_power_w))
            })?;
            let whiten = chol.l().try_inverse().ok_or_else(|| Error::Singular("covariance factor".into()))?;
            Ok(Point {
                x: d.drive_power_w.sqrt(),
                drive_power_w: d.drive_power_w,
                observed: DVector::from_iterator(k, orders.iter().map(|&n| d.p[n as usize])),
                whiten,
                sigma: (0..k).map(|i| cov[(i, i)].sqrt()).collect(),
            })
        })
        .collect()
}

fn validate(cfg: &GlobalFitConfig) -> Result<()> {
    if cfg.orders.is_empty() || cfg.orders.iter().any(|&n| n > 2) {
        return Err(Error::Config("globalfit.orders must be a non-empty subset of 0..=2".into()));
    }
    let mut sorted = cfg.orders.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != cfg.orders.len() {
        return Err(Error::Config("globalfit.orders has duplicates".into()));
    }
    if !(cfg.alpha_max > 0.0 && cfg.alpha_max < 1.0) || !(0.0..1.0).contains(&cfg.alpha_fixed) {
        return Err(Error::Config("alpha bounds must lie in [0, 1)".into()));
    }
    if !(cfg.m_grid[0] > 0.0 && cfg.m_grid[1] > cfg.m_grid[0]) || cfg.m_grid_steps < 2 || cfg.alpha_grid_steps < 1 {
        return Err(Error::Config("invalid globalfit start grid".into()));
    }
    Ok(())
}

/// Weighted least squares of `N·P_n(m·√P_in, α)` over every (order, power)
/// point.
pub fn fit_global(data: &[SidebandPowers], cfg: &GlobalFitConfig) -> Result<GlobalFitResult> {
    validate(cfg)?;
    if data.len() < 4 {
        return Err(Error::InvalidInput(format!("global fit needs ≥ 4 drive powers, got {}", data.len())));
    }
    let layout = Layout {
        fit_alpha: cfg.fit_alpha,
        float_n: cfg.float_normalization,
        log_m: cfg.log_m,
        alpha_max: cfg.alpha_max,
        alpha_fixed: cfg.alpha_fixed,
        n_fixed: cfg.normalization,
    };
    let problem = GlobalProblem { points: build_points(data, &cfg.orders)?, orders: cfg.orders.clone(), layout };
    let n_res = problem.points.len() * cfg.orders.len();
    if n_res <= layout.len() {
        return Err(Error::InvalidInput("not enough points for the floated parameters".into()));
    }
    let (m0, a0, n0) = grid_start(&problem, cfg)?;
    let rep = minimize(&problem, layout.pack(m0, a0, n0), &cfg.lm)?;
    if !rep.converged {
        return Err(Error::NonConvergence { iterations: rep.iterations, chi2: rep.chi2 });
    }
    let ([m, alpha, norm], deriv) = layout.unpack(&rep.params);
    let mut names = vec!["m".to_string()];
    let mut scale = vec![deriv[0]];
    if layout.fit_alpha {
        names.push("alpha".into());
        scale.push(deriv[1]);
    }
    if layout.float_n {
        names.push("normalization".into());
        scale.push(1.0);
    }
    let cov: Vec<Vec<f64>> = (0..scale.len())
        .map(|i| (0..scale.len()).map(|j| scale[i] * rep.covariance[(i, j)] * scale[j]).collect())
        .collect();
    let sd = |name: &str| names.iter().position(|n| n == name).map_or(0.0, |i| cov[i][i].max(0.0).sqrt());
    let mut residuals = Vec::with_capacity(n_res);
    for pt in &problem.points {
        let model = problem.raw_model(pt.x, m, alpha)?;
        for (r, &order) in cfg.orders.iter().enumerate() {
            let mv = norm * model[r];
            residuals.push(PointResidual {
                drive_power_w: pt.drive_power_w,
                order,
                observed: pt.observed[r],
                sigma: pt.sigma[r],
                model: mv,
                pull: (pt.observed[r] - mv) / pt.sigma[r],
            });
        }
    }
    let dof = rep.dof();
    Ok(GlobalFitResult {
        m,
        m_uncertainty: sd("m"),
        alpha,
        alpha_uncertainty: sd("alpha"),
        normalization: norm,
        normalization_uncertainty: sd("normalization"),
        alpha_at_boundary: layout.fit_alpha
            && (alpha < cfg.boundary_margin || alpha > cfg.alpha_max - cfg.boundary_margin),
        parameter_names: names,
        covariance: cov,
        chi2: rep.chi2,
        dof,
        chi2_reduced: rep.chi2 / dof.max(1) as f64,
        converged: rep.converged,
        iterations: rep.iterations,
        residuals,
    })
}

/// Coarse grid over `(m, α)` with the normalization solved linearly.
fn grid_start(problem: &GlobalProblem, cfg: &GlobalFitConfig) -> Result<(f64, f64, f64)> {
    let alphas: Vec<f64> = if cfg.fit_alpha {
        let k = cfg.alpha_grid_steps;
        (0..k).map(|i| cfg.alpha_max * (i as f64 + 0.5) / k as f64).collect()
    } else {
        vec![cfg.alpha_fixed]
    };
    let (lo, hi) = (cfg.m_grid[0].ln(), cfg.m_grid[1].ln());
    let steps = cfg.m_grid_steps;
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for &alpha in &alphas {
        for i in 0..steps {
            let m = (lo + (hi - lo) * i as f64 / (steps - 1) as f64).exp();
            let (mut ff, mut fd, mut dd) = (0.0, 0.0, 0.0);
            let mut ok = true;
            for pt in &problem.points {
                let Ok(model) = problem.raw_model(pt.x, m, alpha) else {
                    ok = false;
                    break;
                };
                let f = &pt.whiten * DVector::from_vec(model);
                let d = &pt.whiten * &pt.observed;
                ff += f.dot(&f);
                fd += f.dot(&d);
                dd += d.dot(&d);
            }
            if !ok || ff <= 0.0 {
                continue;
            }
            let n = if cfg.float_normalization { fd / ff } else { cfg.normalization };
            let chi2 = dd - 2.0 * n * fd + n * n * ff;
            if best.is_none_or(|b| chi2 < b.0) {
                best = Some((chi2, m, alpha, n));
            }
        }
    }
    let (_, m, alpha, n) = best.ok_or_else(|| Error::Domain("no start point inside the model domain".into()))?;
    Ok((m, alpha, n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CPerp {
    /// m/√W.
    pub value: f64,
    pub uncertainty: f64,
}

/// `C⊥ = m/(η·k₀)` with the uncertainty of `m` carried linearly.
pub fn extract_c_perp(m: f64, m_uncertainty: f64, eta: f64, k0_per_m: f64) -> Result<CPerp> {
    if !(eta > 0.0 && k0_per_m > 0.0) {
        return Err(Error::Domain(format!("η and k₀ must be positive, got {eta} and {k0_per_m}")));
    }
    let scale = 1.0 / (eta * k0_per_m);
    Ok(CPerp { value: m * scale, uncertainty: m_uncertainty.abs() * scale })
}

/// Model curves `N·P_n` for `n = 0, 1, 2` on `points` drive powers up to
/// `max_power_w`, as `(power, [P0, P1, P2])`.
pub fn model_curves(fit: &GlobalFitResult, max_power_w: f64, points: usize) -> Result<Vec<(f64, [f64; 3])>> {
    if !(max_power_w > 0.0) || points < 2 {
        return Err(Error::InvalidInput("curve range must be positive with ≥ 2 points".into()));
    }
    (0..points)
        .map(|i| {
            let x = max_power_w.sqrt() * i as f64 / (points - 1) as f64;
            let p = sideband_powers(2, fit.m * x, fit.alpha)?;
            Ok((x * x, [0, 1, 2].map(|k| fit.normalization * p[k])))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_drive_is_unmodulated() {
        for (n, want) in [(0, 1.0), (1, 0.0), (2, 0.0)] {
            assert_eq!(model_prediction(n, 0.0, 4.34, 0.36).unwrap(), want);
        }
    }

    #[test]
    fn c_perp_is_linear_in_m() {
        let a = extract_c_perp(4.34, 0.04, 0.35, 7.30e10).unwrap();
        let b = extract_c_perp(8.68, 0.08, 0.35, 7.30e10).unwrap();
        assert!((b.value / a.value - 2.0).abs() < 1e-15);
        assert!((a.value - 1.699e-10).abs() < 1e-12);
        assert!(extract_c_perp(1.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn layout_round_trip() {
        let l = Layout { fit_alpha: true, float_n: true, log_m: true, alpha_max: 0.95, alpha_fixed: 0.0, n_fixed: 1.0 };
        let ([m, a, n], _) = l.unpack(&l.pack(4.34, 0.36, 0.7));
        assert!((m - 4.34).abs() < 1e-12 && (a - 0.36).abs() < 1e-12 && (n - 0.7).abs() < 1e-15);
    }
}
