//! Principal branch of the Lambert W function on `[0, inf)`.
//!
//! Two routes are provided. [`lambert_w`] runs Halley's method directly on
//! `w e^w = z`. [`lambert_w_log`] takes `log z` and solves `w + log w = log z`,
//! which never forms `z` and so survives arguments like `exp(1e4)` that show
//! up in the power-entropy proximal maps at small blur.

use crate::error::{Result, UotError};

const MAX_ITER: usize = 50;

/// `W(z)` for `z >= 0`, i.e. the `w >= 0` with `w e^w = z`.
pub fn lambert_w(z: f64) -> Result<f64> {
    if z.is_nan() || z < 0.0 {
        return Err(UotError::Domain(format!("lambert_w needs z >= 0, got {z}")));
    }
    if z == 0.0 {
        return Ok(0.0);
    }
    if z.is_infinite() {
        return Ok(f64::INFINITY);
    }
    if z > 1e300 {
        // e^w would overflow on the way; the log form is exact enough here.
        return Ok(lambert_w_log(z.ln()));
    }
    let mut w = if z < std::f64::consts::E {
        z.ln_1p() * (1.0 - 0.3 * z.ln_1p() / (1.0 + z.ln_1p()))
    } else {
        let lz = z.ln();
        lz - lz.ln()
    };
    for _ in 0..MAX_ITER {
        let ew = w.exp();
        let r = w * ew - z;
        let d1 = ew * (w + 1.0);
        let step = r / (d1 - (w + 2.0) * r / (2.0 * w + 2.0));
        let next = w - step;
        let next = if next <= 0.0 { 0.5 * w } else { next };
        let done = (next - w).abs() <= 1e-15 * next.abs().max(f64::MIN_POSITIVE);
        w = next;
        if done {
            break;
        }
    }
    Ok(w)
}

/// Solves `w + log w = log_z` for `w > 0`, i.e. `W(exp(log_z))`.
pub fn lambert_w_log(log_z: f64) -> f64 {
    if log_z.is_nan() {
        return f64::NAN;
    }
    if log_z == f64::INFINITY {
        return f64::INFINITY;
    }
    if log_z < -700.0 {
        // W(z) = z - z^2 + ..., and z^2 is below the resolution of z here.
        return log_z.exp();
    }
    let mut w = if log_z > 1.0 { log_z - log_z.max(1e-300).ln() } else { log_z.exp().min(1.0) };
    // Halley converges cubically; stop at rounding level of the residual.
    let tol = 2.0 * f64::EPSILON * (1.0 + log_z.abs());
    for _ in 0..MAX_ITER {
        let h = w + w.ln() - log_z;
        if h.abs() <= tol {
            break;
        }
        let d1 = 1.0 + 1.0 / w;
        let d2 = -1.0 / (w * w);
        let step = 2.0 * h * d1 / (2.0 * d1 * d1 - h * d2);
        let mut next = w - step;
        if next <= 0.0 {
            next = 0.5 * w;
        }
        let converged = (next - w).abs() <= 2.0 * f64::EPSILON * next;
        w = next;
        if converged {
            break;
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    // Omega constant, by bisection on w e^w = 1 carried out to 1e-15.
    fn omega_by_bisection() -> f64 {
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        while hi - lo > 1e-15 {
            let mid = 0.5 * (lo + hi);
            if mid * mid.exp() < 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn omega_oracle_matches_frozen_value() {
        assert!((omega_by_bisection() - 0.567_143_290_409_783_8).abs() < 2e-15);
    }

    #[test]
    fn small_examples() {
        assert_eq!(lambert_w(0.0).unwrap(), 0.0);
        assert!((lambert_w(std::f64::consts::E).unwrap() - 1.0).abs() < 1e-15);
        assert!((lambert_w(1.0).unwrap() - 0.567_143_290_409_783_8).abs() < 1e-15);
        assert!(matches!(lambert_w(-0.1), Err(UotError::Domain(_))));
    }

    #[test]
    fn log_form_examples() {
        assert!((lambert_w_log(1.0) - 1.0).abs() < 1e-15);
        assert!((lambert_w_log(0.0) - 0.567_143_290_409_783_8).abs() < 1e-15);
        let w = lambert_w_log(700.0);
        assert!((w + w.ln() - 700.0).abs() <= 1e-9);
        let w = lambert_w_log(1e5);
        assert!((w + w.ln() - 1e5).abs() <= 1e-9);
    }

    #[test]
    fn routes_agree() {
        let mut lz: f64 = -30.0;
        while lz < 690.0 {
            let a = lambert_w(lz.exp()).unwrap();
            let b = lambert_w_log(lz);
            assert!((a - b).abs() <= 1e-10 * a.abs(), "log_z={lz}: {a} vs {b}");
            lz += 0.37;
        }
    }

    #[test]
    fn tiny_arguments() {
        let w = lambert_w_log(-720.0);
        assert!(w > 0.0 && w < 1e-300);
        let w = lambert_w(1e-300).unwrap();
        assert!((w - 1e-300).abs() <= 1e-310);
    }
}
