//! The SQUINT evidence `xi(R, V)`.
//!
//! `xi(R, V) = integral over eta in [0, 1/2] of exp(eta R - eta^2 V)`, which in
//! closed form is
//!
//! ```text
//! sqrt(pi) exp(R^2 / 4V) (erfc(-R / 2 sqrt V) - erfc((V - R) / 2 sqrt V)) / (2 sqrt V)
//! ```
//!
//! Evaluated literally this overflows as soon as `R^2 / 4V > 709` and cancels
//! catastrophically elsewhere, so the log of `xi` is computed piecewise:
//! with `s = sqrt V`, `a = -R / 2s` and `b = a + s/2`,
//!
//! * `a >= 0`: `xi = c (erfcx(a) - exp(R/2 - V/4) erfcx(b))`
//! * `b <= 0`: `xi = c exp(R/2 - V/4) (erfcx(-b) - exp(V/4 - R/2) erfcx(-a))`
//! * `a < 0 < b`: `xi = c exp(a^2) (erf(-a) + erf(b))`
//!
//! where `c = sqrt(pi) / 2s`. Every bracket is a difference of bounded, ordered
//! terms or a sum of positive ones. Below `V = 1e-12` a three-term expansion in
//! `V` is used instead.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Below this `V` the series expansion around `V = 0` is used.
pub const SMALL_VARIANCE: f64 = 1e-12;

/// `ln xi(R, V)`. Finite for all finite `R` and `V >= 0`.
pub fn log_squint_potential<T: Scalar>(regret: T, variance: T) -> Result<T> {
    if !regret.is_finite() || !variance.is_finite() {
        return Err(Error::NonFinite("squint potential argument"));
    }
    if variance < T::zero() {
        return Err(Error::out_of_range("V", variance, "[0, inf)"));
    }
    if variance < T::lit(SMALL_VARIANCE) {
        return Ok(log_potential_series(regret, variance));
    }
    let half = T::lit(0.5);
    let quarter = T::lit(0.25);
    let s = variance.sqrt();
    let a = -regret / (s + s);
    let b = a + half * s;
    // ln(sqrt(pi) / 2s)
    let log_c = half * T::PI().ln() - T::LN_2() - s.ln();
    let drift = half * regret - quarter * variance;
    let value = if a >= T::zero() {
        log_c + (a.erfcx() - drift.exp() * b.erfcx()).ln()
    } else if b <= T::zero() {
        log_c + drift + ((-b).erfcx() - (-drift).exp() * (-a).erfcx()).ln()
    } else {
        log_c + a * a + ((-a).erf() + b.erf()).ln()
    };
    Ok(value)
}

/// `xi(R, V)`. Overflows to `+inf` only where the true value exceeds the
/// floating-point range; use [`log_squint_potential`] when ratios are all
/// that matter.
pub fn squint_potential<T: Scalar>(regret: T, variance: T) -> Result<T> {
    log_squint_potential(regret, variance).map(T::exp)
}

/// `ln(I0 - V I2 + V^2 I4 / 2)` with `In = integral over [0, 1/2] of eta^n exp(eta R)`.
fn log_potential_series<T: Scalar>(regret: T, variance: T) -> T {
    let c = T::lit(0.5) * regret;
    let shift = c.max(T::zero());
    let j = scaled_moments(c);
    // In = Jn(c) / 2^(n+1), Jn scaled by exp(-shift)
    let bracket = j[0] / T::lit(2.0) - variance * j[2] / T::lit(8.0)
        + variance * variance * j[4] / T::lit(64.0);
    shift + bracket.ln()
}

/// `Jn(c) exp(-max(c, 0))` for n = 0..=4, where `Jn(c) = integral over [0, 1] of u^n exp(c u)`.
fn scaled_moments<T: Scalar>(c: T) -> [T; 5] {
    let mut j = [T::zero(); 5];
    if c.abs() < T::lit(2.0) {
        // power series: Jn(c) = sum_k c^k / (k! (n + k + 1))
        for (n, slot) in j.iter_mut().enumerate() {
            let mut term = T::one();
            let mut acc = T::zero();
            for k in 0..60 {
                let contrib = term / T::from_usize(n + k + 1).unwrap();
                acc = acc + contrib;
                if contrib.abs() < T::epsilon() * acc.abs() {
                    break;
                }
                term = term * c / T::from_usize(k + 1).unwrap();
            }
            *slot = acc;
        }
        if c > T::zero() {
            let scale = (-c).exp();
            for v in &mut j {
                *v = *v * scale;
            }
        }
    } else if c > T::zero() {
        j[0] = -(-c).exp_m1() / c;
        for n in 1..5 {
            j[n] = (T::one() - T::from_usize(n).unwrap() * j[n - 1]) / c;
        }
    } else {
        let ec = c.exp();
        j[0] = c.exp_m1() / c;
        for n in 1..5 {
            j[n] = (ec - T::from_usize(n).unwrap() * j[n - 1]) / c;
        }
    }
    j
}

#[cfg(test)]
mod tests {
    use super::*;

    // (R, V, ln xi) from 40-digit quadrature of the defining integral
    const REFERENCE: &[(f64, f64, f64)] = &[
        (0.0, 1.0, -0.773747863311576383),
        (0.0, 1e-6, -0.69314726389327586497),
        (1.0, 1.0, -0.523747863311576383),
        (-1.0, 1.0, -1.0033622056033452839),
        (10.0, 1.0, 2.5215991205358205625),
        (-10.0, 1.0, -2.3264689886733209832),
        (50.0, 1e-6, 21.087976763757966164),
        (-50.0, 1e-6, -3.9120230062420339971),
        (50.0, 1e4, -4.4194664797419521591),
        (-50.0, 1e4, -4.9868672270169560084),
        (3.0, 0.5, 0.092173809125610493531),
        (25.0, 49.9, 1.7360296839462346853),
        (0.001, 1e-6, -0.69289725348702606006),
        (1e6, 1e9, 240.21073202445149451),
        (-1e6, 1e9, -13.817500655244485477),
        (-1e6, 1.0, -13.815510557966274104),
    ];

    #[test]
    fn matches_reference_values() {
        for &(r, v, expected) in REFERENCE {
            let got = log_squint_potential(r, v).unwrap();
            // absolute error in the log is relative error in xi
            assert!((got - expected).abs() < 1e-12, "ln xi({r}, {v}) = {got}, want {expected}");
        }
    }

    #[test]
    fn closed_form_at_zero_regret() {
        let xi = squint_potential(0.0f64, 1.0).unwrap();
        assert!((xi - 0.46128100641279244876).abs() < 1e-14);
    }

    #[test]
    fn zero_variance_limit() {
        assert_eq!(squint_potential(0.0, 0.0).unwrap(), 0.5);
        assert!((squint_potential(0.0f64, 1e-9).unwrap() - 0.5).abs() < 1e-9);
        // (e^{R/2} - 1) / R
        for r in [-40.0, -3.0, -0.5, 0.7, 4.0, 30.0] {
            let expected = (0.5f64 * r).exp_m1() / r;
            let got = squint_potential(r, 0.0).unwrap();
            assert!(((got - expected) / expected).abs() < 1e-14, "R={r}");
        }
    }

    #[test]
    fn series_and_closed_form_agree_at_threshold() {
        for r in [-20.0, -1.0, 0.0, 1e-7, 0.3, 2.0, 15.0] {
            let below: f64 = log_squint_potential(r, SMALL_VARIANCE * 0.999).unwrap();
            let above = log_squint_potential(r, SMALL_VARIANCE * 1.001).unwrap();
            assert!((below - above).abs() < 1e-8, "R={r}: {below} vs {above}");
        }
    }

    #[test]
    fn finite_for_extreme_regret() {
        for r in [-1e6, -1e3, 1e3, 1e6] {
            for v in [0.0, 1e-13, 1e-6, 1.0, 1e3, 1e6, 1e9] {
                let l: f64 = log_squint_potential(r, v).unwrap();
                assert!(l.is_finite(), "R={r} V={v}");
            }
        }
        let tiny = squint_potential(-1e6f64, 1e9).unwrap();
        assert!(tiny > 0.0 && tiny.is_finite());
    }

    #[test]
    fn rejects_negative_variance() {
        assert!(log_squint_potential(0.0, -1.0).is_err());
        assert!(log_squint_potential(f64::NAN, 1.0).is_err());
    }
}
