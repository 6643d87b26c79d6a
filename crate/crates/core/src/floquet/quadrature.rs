//! Composite Gauss–Legendre quadrature with panel doubling.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Nodes per panel.
pub const GL_ORDER: usize = 64;
/// Panel doubling stops once successive estimates agree to this.
pub const DOUBLING_TOLERANCE: f64 = 1e-10;
/// Estimates worse than this are reported as non-convergence.
pub const FAILURE_TOLERANCE: f64 = 1e-9;
const MAX_DOUBLINGS: usize = 10;

/// Gauss–Legendre nodes and weights on [-1, 1], computed by Newton iteration
/// on the Legendre recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let n = n as f64;
    let dp = n * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

fn rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(GL_ORDER))
}

fn composite(dim: usize, a: f64, b: f64, panels: usize, f: &impl Fn(f64, &mut [f64]), out: &mut [f64]) {
    let (nodes, weights) = rule();
    out.iter_mut().for_each(|v| *v = 0.0);
    let mut buf = vec![0.0; dim];
    let h = (b - a) / panels as f64;
    for p in 0..panels {
        let lo = a + p as f64 * h;
        let mid = lo + 0.5 * h;
        for (x, w) in nodes.iter().zip(weights) {
            f(mid + 0.5 * h * x, &mut buf);
            for (o, v) in out.iter_mut().zip(&buf) {
                *o += 0.5 * h * w * v;
            }
        }
    }
}

/// Integrates a vector-valued function over `[a, b]`.
///
/// Starts from a single 64-node panel and doubles the panel count until two
/// successive estimates agree to [`DOUBLING_TOLERANCE`] in every component.
/// Returns the estimate and the last difference.
pub fn integrate_vec(dim: usize, a: f64, b: f64, f: impl Fn(f64, &mut [f64])) -> Result<(Vec<f64>, f64)> {
    let mut coarse = vec![0.0; dim];
    let mut fine = vec![0.0; dim];
    composite(dim, a, b, 1, &f, &mut coarse);
    let mut panels = 1;
    let mut err = f64::INFINITY;
    for _ in 0..MAX_DOUBLINGS {
        panels *= 2;
        composite(dim, a, b, panels, &f, &mut fine);
        err = coarse.iter().zip(&fine).map(|(c, f)| (c - f).abs()).fold(0.0, f64::max);
        std::mem::swap(&mut coarse, &mut fine);
        if err < DOUBLING_TOLERANCE {
            return Ok((coarse, err));
        }
    }
    if err < FAILURE_TOLERANCE {
        Ok((coarse, err))
    } else {
        Err(Error::Quadrature { estimate: err })
    }
}

pub fn integrate(a: f64, b: f64, f: impl Fn(f64) -> f64) -> Result<f64> {
    integrate_vec(1, a, b, |x, out| out[0] = f(x)).map(|(v, _)| v[0])
}
