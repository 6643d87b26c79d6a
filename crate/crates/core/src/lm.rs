//! Damped Gauss–Newton (Levenberg–Marquardt) least-squares engine shared by
//! the spectrum, S-parameter and global fits.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A weighted least-squares problem: minimize `Σ r_i(p)²` where the
/// residuals are already divided by their standard deviations.
pub trait LeastSquaresProblem {
    fn n_params(&self) -> usize;

    fn residuals(&self, params: &DVector<f64>) -> Result<DVector<f64>>;

    fn jacobian(&self, params: &DVector<f64>) -> Result<DMatrix<f64>>;

    /// Maps a trial point back into the feasible set.
    fn project(&self, _params: &mut DVector<f64>) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Stop when an accepted step changes χ² by less than this fraction.
    pub chi2_rel_tolerance: f64,
    /// Stop when `|δp| < step_tolerance·(|p| + step_tolerance)`.
    pub step_tolerance: f64,
    pub initial_damping: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self { max_iterations: 500, chi2_rel_tolerance: 1e-10, step_tolerance: 1e-12, initial_damping: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmReport {
    pub params: DVector<f64>,
    pub chi2: f64,
    pub n_residuals: usize,
    pub iterations: usize,
    pub converged: bool,
    /// `(JᵀJ)⁻¹` at the solution (pseudo-inverse when singular).
    pub covariance: DMatrix<f64>,
    /// Ratio of the largest to smallest singular value of `JᵀJ`.
    pub condition: f64,
    pub singular: bool,
}

impl LmReport {
    pub fn dof(&self) -> usize {
        self.n_residuals.saturating_sub(self.params.len())
    }

    pub fn chi2_reduced(&self) -> f64 {
        self.chi2 / self.dof().max(1) as f64
    }

    pub fn std_errors(&self) -> Vec<f64> {
        (0..self.params.len()).map(|i| self.covariance[(i, i)].max(0.0).sqrt()).collect()
    }
}

const MAX_DAMPING: f64 = 1e16;
const SINGULAR_RCOND: f64 = 1e-14;

/// Runs the damped Gauss–Newton iteration from `start`.
///
/// Non-convergence within `max_iterations` is not an error: the best iterate
/// is returned with `converged = false`.
pub fn minimize<P: LeastSquaresProblem + ?Sized>(problem: &P, start: DVector<f64>, opts: &LmOptions) -> Result<LmReport> {
    if start.len() != problem.n_params() {
        return Err(Error::InvalidInput(format!(
            "start vector has {} entries, problem has {} parameters",
            start.len(),
            problem.n_params()
        )));
    }
    let mut params = start;
    problem.project(&mut params);
    let mut r = problem.residuals(&params)?;
    let mut chi2 = r.norm_squared();
    if !chi2.is_finite() {
        return Err(Error::InvalidInput("non-finite residuals at the starting point".into()));
    }
    let mut lambda = opts.initial_damping;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        iterations += 1;
        let j = problem.jacobian(&params)?;
        let jtj = j.tr_mul(&j);
        let grad = j.tr_mul(&r);
        let diag_floor = jtj.diagonal().max() * 1e-15 + f64::MIN_POSITIVE;

        let mut accepted = false;
        while lambda <= MAX_DAMPING {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += lambda * jtj[(i, i)].max(diag_floor);
            }
            let step = solve_spd(a, -&grad);
            let Some(step) = step else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = &params + &step;
            problem.project(&mut trial);
            let r_trial = match problem.residuals(&trial) {
                Ok(r) => r,
                Err(Error::Domain(_)) => {
                    lambda *= 10.0;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let chi2_trial = r_trial.norm_squared();
            if chi2_trial.is_finite() && chi2_trial <= chi2 {
                let actual_step = (&trial - &params).norm();
                let rel = (chi2 - chi2_trial) / chi2.max(f64::MIN_POSITIVE);
                params = trial;
                r = r_trial;
                chi2 = chi2_trial;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if rel < opts.chi2_rel_tolerance
                    || actual_step < opts.step_tolerance * (params.norm() + opts.step_tolerance)
                {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No downhill step exists at any damping: a (local) minimum.
            converged = true;
        }
        if converged {
            break;
        }
    }

    let j = problem.jacobian(&params)?;
    let jtj = j.tr_mul(&j);
    let (covariance, condition) = pseudo_inverse(&jtj);
    Ok(LmReport {
        params,
        chi2,
        n_residuals: r.len(),
        iterations,
        converged,
        singular: !(condition.is_finite() && condition < 1.0 / SINGULAR_RCOND),
        covariance,
        condition,
    })
}

fn solve_spd(a: DMatrix<f64>, b: DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        let x = ch.solve(&b);
        if x.iter().all(|v| v.is_finite()) {
            return Some(x);
        }
    }
    let x = a.svd(true, true).solve(&b, 1e-14).ok()?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Moore–Penrose inverse of a symmetric positive semidefinite matrix and its
/// condition number.
pub fn pseudo_inverse(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let n = m.nrows();
    // Equilibrate so that badly scaled parameters do not look singular.
    let scale: Vec<f64> = (0..n).map(|i| {
        let d = m[(i, i)];
        if d > 0.0 { 1.0 / d.sqrt() } else { 1.0 }
    }).collect();
    let mut scaled = m.clone();
    for i in 0..n {
        for j in 0..n {
            scaled[(i, j)] *= scale[i] * scale[j];
        }
    }
    let svd = scaled.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    let mut inv = svd.pseudo_inverse(smax * SINGULAR_RCOND).unwrap_or_else(|_| DMatrix::zeros(n, n));
    for i in 0..n {
        for j in 0..n {
            inv[(i, j)] *= scale[i] * scale[j];
        }
    }
    (inv, condition)
}

/// Central-difference Jacobian of a residual function.
pub fn numeric_jacobian(
    f: impl Fn(&DVector<f64>) -> Result<DVector<f64>>,
    params: &DVector<f64>,
    rel_step: f64,
) -> Result<DMatrix<f64>> {
    let base = f(params)?;
    let mut jac = DMatrix::zeros(base.len(), params.len());
    for k in 0..params.len() {
        let h = rel_step * params[k].abs().max(1.0);
        let mut up = params.clone();
        up[k] += h;
        let mut down = params.clone();
        down[k] -= h;
        let col = (f(&up)? - f(&down)?) / (2.0 * h);
        jac.set_column(k, &col);
    }
    Ok(jac)
}
