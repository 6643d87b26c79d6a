//! Bessel functions of the first kind, integer order, real non-negative
//! argument.
//!
//! Small arguments use the power series; everything else uses Miller's
//! downward recurrence normalized by `J0 + 2 Σ J_2k = 1`.

use crate::error::{Error, Result};

/// Largest order accepted.
pub const MAX_ORDER: usize = 100;
/// Largest argument accepted.
pub const MAX_ARGUMENT: f64 = 100.0;

const RESCALE_THRESHOLD: f64 = 1e200;

fn check_domain(n: usize, z: f64) -> Result<()> {
    if n > MAX_ORDER {
        return Err(Error::Domain(format!("Bessel order {n} exceeds {MAX_ORDER}")));
    }
    if !(0.0..=MAX_ARGUMENT).contains(&z) {
        return Err(Error::Domain(format!("Bessel argument {z} outside [0, {MAX_ARGUMENT}]")));
    }
    Ok(())
}

fn use_series(n: usize, z: f64) -> bool {
    z <= 2.0 || (n <= 12 && z <= n as f64)
}

/// `J_n(z)` to about 1e-13 absolute.
pub fn bessel_j(n: usize, z: f64) -> Result<f64> {
    check_domain(n, z)?;
    if z == 0.0 {
        return Ok(if n == 0 { 1.0 } else { 0.0 });
    }
    if use_series(n, z) {
        Ok(series(n, z))
    } else {
        let all = miller(n, z);
        Ok(all[n])
    }
}

/// `J_0(z) ..= J_{n_max}(z)` in one pass.
pub fn bessel_j_orders(n_max: usize, z: f64) -> Result<Vec<f64>> {
    check_domain(n_max, z)?;
    let mut out = vec![0.0; n_max + 1];
    bessel_j_orders_into(z, &mut out);
    Ok(out)
}

/// Fills `out[k] = J_k(z)`; the caller guarantees the domain.
pub(crate) fn bessel_j_orders_into(z: f64, out: &mut [f64]) {
    let n_max = out.len() - 1;
    if z == 0.0 {
        out.iter_mut().for_each(|v| *v = 0.0);
        out[0] = 1.0;
        return;
    }
    if z <= 2.0 {
        for (k, v) in out.iter_mut().enumerate() {
            *v = series(k, z);
        }
        return;
    }
    let all = miller(n_max, z);
    out.copy_from_slice(&all[..=n_max]);
}

fn series(n: usize, z: f64) -> f64 {
    let half = 0.5 * z;
    let mut term = 1.0;
    for k in 1..=n {
        term *= half / k as f64;
    }
    let q = half * half;
    let mut sum = term;
    let mut k = 0usize;
    loop {
        k += 1;
        term *= -q / (k as f64 * (n + k) as f64);
        sum += term;
        if term.abs() <= 1e-17 * sum.abs() || k > 500 {
            break;
        }
    }
    sum
}

/// Downward recurrence from an even start order well above `max(n, z)`.
/// Returns `J_0 ..= J_start`.
fn miller(n: usize, z: f64) -> Vec<f64> {
    let top = (n as f64).max(z);
    let mut start = (top + 30.0 + (50.0 * top).sqrt()) as usize;
    start += start % 2;
    let mut vals = vec![0.0; start + 2];
    vals[start + 1] = 0.0;
    vals[start] = 1e-30;
    let mut norm = 0.0;
    let two_over_z = 2.0 / z;
    for k in (1..=start).rev() {
        let prev = k as f64 * two_over_z * vals[k] - vals[k + 1];
        vals[k - 1] = prev;
        if (k - 1) % 2 == 0 && k - 1 > 0 {
            norm += 2.0 * prev;
        }
        if prev.abs() > RESCALE_THRESHOLD {
            let s = 1.0 / RESCALE_THRESHOLD;
            for v in vals[k - 1..].iter_mut() {
                *v *= s;
            }
            norm *= s;
        }
    }
    if start.is_multiple_of(2) && start > 0 {
        // vals[start] entered before the loop started accumulating.
        norm += 2.0 * vals[start];
    }
    norm += vals[0];
    let inv = 1.0 / norm;
    vals.truncate(start + 1);
    vals.iter_mut().for_each(|v| *v *= inv);
    vals
}

/// `J_n'(z) = (J_{n-1} - J_{n+1}) / 2`, with `J_0' = -J_1`.
pub fn derivative_from_orders(orders: &[f64], n: usize) -> f64 {
    if n == 0 {
        -orders[1]
    } else {
        0.5 * (orders[n - 1] - orders[n + 1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_at_zero() {
        assert_eq!(bessel_j(0, 0.0).unwrap(), 1.0);
        for n in 1..=12 {
            assert_eq!(bessel_j(n, 0.0).unwrap(), 0.0);
        }
    }

    /// Independent 50-term power series in plain f64, written without the
    /// recurrences used by the implementation.
    fn series_oracle(n: u32, z: f64) -> f64 {
        let mut sum = 0.0;
        for k in 0..50u32 {
            let mut t = (z / 2.0).powi((2 * k + n) as i32);
            for j in 1..=k {
                t /= j as f64;
            }
            for j in 1..=(k + n) {
                t /= j as f64;
            }
            sum += if k % 2 == 0 { t } else { -t };
        }
        sum
    }

    #[test]
    fn j1_of_two_matches_series_oracle() {
        let oracle = series_oracle(1, 2.0);
        assert!((bessel_j(1, 2.0).unwrap() - oracle).abs() < 1e-14);
        assert!((oracle - 0.576_724_807_756_873_4).abs() < 1e-15);
    }

    #[test]
    fn series_oracle_agrees_on_moderate_arguments() {
        for n in 0..=6u32 {
            for &z in &[0.3, 1.0, 2.5, 4.0, 6.0] {
                let a = bessel_j(n as usize, z).unwrap();
                let b = series_oracle(n, z);
                assert!((a - b).abs() < 1e-12, "n={n} z={z} {a} {b}");
            }
        }
    }

    #[test]
    fn domain_errors() {
        assert!(bessel_j(0, -1.0).is_err());
        assert!(bessel_j(MAX_ORDER + 1, 1.0).is_err());
        assert!(bessel_j(0, f64::NAN).is_err());
        assert!(bessel_j(0, 1e3).is_err());
    }

    #[test]
    fn orders_agree_with_single_evaluation() {
        for &z in &[0.5, 3.0, 7.5, 19.0, 29.5] {
            let all = bessel_j_orders(20, z).unwrap();
            for (n, v) in all.iter().enumerate() {
                assert!((v - bessel_j(n, z).unwrap()).abs() < 1e-13, "n={n} z={z}");
            }
        }
    }

    #[test]
    fn small_argument_does_not_overflow() {
        let v = bessel_j(0, 2.0 + 1e-9).unwrap();
        assert!(v.is_finite());
        let tiny = bessel_j_orders(30, 1e-8).unwrap();
        assert!((tiny[0] - 1.0).abs() < 1e-15);
        assert!((tiny[1] - 0.5e-8).abs() < 1e-20);
    }
}
