//! Norm-bound series `K = sum_n L^n T^n (β-α)^{-qn} n^{qn} / n!`.
//!
//! Terms are handled in log space: with the constants that come out of the
//! moment estimates `K` is routinely far beyond `f64` range, and every
//! comparison against it is done on logarithms.

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::numeric::{ln_factorial, log_add_exp};

/// Beyond this many terms the closed-form majorant is used instead of summing.
const MAX_TERMS: u64 = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeriesBound {
    /// Natural log of the bound.
    pub ln_value: f64,
    /// Number of summed terms (0 when the closed form was used).
    pub terms: u64,
    /// True when the value is the closed-form majorant rather than a partial sum.
    pub closed_form: bool,
}

impl SeriesBound {
    /// The bound itself; `inf` once it leaves `f64` range.
    pub fn value(&self) -> f64 {
        self.ln_value.exp()
    }

    pub fn log10(&self) -> f64 {
        self.ln_value / std::f64::consts::LN_10
    }
}

fn check_args(l: f64, horizon: f64, q: f64, alpha: f64, beta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&q) {
        return Err(invalid(format!("series order q must satisfy 0 <= q < 1, got {q}")));
    }
    if !(beta > alpha) {
        return Err(invalid(format!("need beta > alpha, got {beta} <= {alpha}")));
    }
    if !(l >= 0.0 && l.is_finite() && horizon >= 0.0 && horizon.is_finite()) {
        return Err(invalid("L and T must be finite and >= 0"));
    }
    Ok(())
}

/// `ln(n^{qn})` with `0^0 = 1`.
fn ln_pow_self(n: u64, q: f64) -> f64 {
    if n == 0 {
        0.0
    } else {
        q * n as f64 * (n as f64).ln()
    }
}

/// `ln` of the `n`-th iterate factor `x^n n^{qn} / n!` with `x = L T / (β-α)^q`.
pub fn iterate_bound_factor(l: f64, horizon: f64, q: f64, alpha: f64, beta: f64, n: u64) -> Result<f64> {
    check_args(l, horizon, q, alpha, beta)?;
    let ln_x = (l * horizon).ln() - q * (beta - alpha).ln();
    if n == 0 {
        return Ok(0.0);
    }
    Ok(n as f64 * ln_x + ln_pow_self(n, q) - ln_factorial(n))
}

/// `sum_{n>=0} L^n T^n (β-α)^{-qn} n^{qn} / n!`, summed until a term drops
/// below `tol` while the terms are decreasing.
///
/// When the peak term sits beyond [`MAX_TERMS`] the Hölder majorant
/// `ln K <= (1-q) (2 x e^q)^{1/(1-q)} - q ln(1 - 2^{-1/q})` is returned.
pub fn norm_bound_series(l: f64, horizon: f64, q: f64, alpha: f64, beta: f64, tol: f64) -> Result<SeriesBound> {
    check_args(l, horizon, q, alpha, beta)?;
    if !(tol > 0.0) {
        return Err(invalid(format!("tol must be > 0, got {tol}")));
    }
    if l == 0.0 || horizon == 0.0 {
        return Ok(SeriesBound { ln_value: 0.0, terms: 1, closed_form: false });
    }
    let ln_x = (l * horizon).ln() - q * (beta - alpha).ln();
    // log-term derivative vanishes at n* = (x e^q)^{1/(1-q)}
    let ln_peak = (ln_x + q) / (1.0 - q);
    if ln_peak > (MAX_TERMS as f64 / 4.0).ln() {
        let ln_y2 = std::f64::consts::LN_2 + ln_x + q;
        let main = (1.0 - q) * (ln_y2 / (1.0 - q)).exp();
        let correction = if q > 0.0 { -q * (1.0 - 2f64.powf(-1.0 / q)).ln() } else { 0.0 };
        return Ok(SeriesBound { ln_value: main + correction, terms: 0, closed_form: true });
    }

    let ln_tol = tol.ln();
    let mut ln_sum = f64::NEG_INFINITY;
    let mut prev = f64::INFINITY;
    let mut n = 0u64;
    loop {
        let ln_term = if n == 0 { 0.0 } else { n as f64 * ln_x + ln_pow_self(n, q) - ln_factorial(n) };
        ln_sum = log_add_exp(ln_sum, ln_term);
        n += 1;
        if (ln_term < ln_tol && ln_term < prev) || n >= MAX_TERMS {
            break;
        }
        prev = ln_term;
    }
    Ok(SeriesBound { ln_value: ln_sum, terms: n, closed_form: false })
}

/// The variant with exponents `q` in place of `qn`:
/// `sum_n L^n T^n (β-α)^{-q} n^q / n!`. Reported alongside
/// [`norm_bound_series`] for comparison only.
pub fn printed_norm_series(l: f64, horizon: f64, q: f64, alpha: f64, beta: f64, tol: f64) -> Result<SeriesBound> {
    check_args(l, horizon, q, alpha, beta)?;
    if !(tol > 0.0) {
        return Err(invalid(format!("tol must be > 0, got {tol}")));
    }
    let ln_lt = (l * horizon).ln();
    let ln_prefactor = -q * (beta - alpha).ln();
    let ln_tol = tol.ln();
    let mut ln_sum = f64::NEG_INFINITY;
    let mut prev = f64::INFINITY;
    let mut n = 0u64;
    loop {
        let ln_npow = if n == 0 {
            if q == 0.0 {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        } else {
            q * (n as f64).ln()
        };
        let ln_term = if n == 0 { ln_npow } else { n as f64 * ln_lt + ln_npow - ln_factorial(n) };
        ln_sum = log_add_exp(ln_sum, ln_term);
        n += 1;
        let past_peak = n as f64 > (l * horizon) + 1.0;
        if (ln_term + ln_prefactor < ln_tol && ln_term < prev && past_peak) || n >= MAX_TERMS {
            break;
        }
        prev = ln_term;
    }
    Ok(SeriesBound { ln_value: ln_sum + ln_prefactor, terms: n, closed_form: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn q_zero_is_exponential() {
        let k = norm_bound_series(1.0, 1.0, 0.0, 0.5, 1.5, 1e-15).unwrap();
        assert!((k.value() - std::f64::consts::E).abs() < 1e-14);
        let k = norm_bound_series(2.0, 1.5, 0.0, 0.5, 1.5, 1e-15).unwrap();
        assert!((k.ln_value - 3.0).abs() < 1e-13);
    }

    #[test]
    fn zero_constant_gives_one() {
        let k = norm_bound_series(0.0, 1.0, 0.5, 0.5, 1.5, 1e-12).unwrap();
        assert_eq!(k.value(), 1.0);
    }

    #[test]
    fn half_order_regression_value() {
        // Independent plain summation of n^{n/2}/n!.
        let mut direct = 1.0f64;
        let mut n = 1u64;
        loop {
            let t = ((n as f64 / 2.0) * (n as f64).ln() - ln_factorial(n)).exp();
            direct += t;
            if t < 1e-17 {
                break;
            }
            n += 1;
        }
        let k = norm_bound_series(1.0, 1.0, 0.5, 0.0, 1.0, 1e-12).unwrap();
        assert!(!k.closed_form);
        assert!((k.value() - direct).abs() < 1e-11, "{} vs {direct}", k.value());
        assert!((k.value() - 5.686_443_765_941_6).abs() < 1e-11, "{}", k.value());
    }

    #[test]
    fn rejects_order_one_and_bad_gap() {
        assert!(norm_bound_series(1.0, 1.0, 1.0, 0.0, 1.0, 1e-12).is_err());
        assert!(norm_bound_series(1.0, 1.0, 0.5, 1.0, 1.0, 1e-12).is_err());
        assert!(norm_bound_series(1.0, 1.0, 0.5, 0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn closed_form_majorizes_partial_sums() {
        // Force a moderate x and compare the majorant with the exact sum.
        let (l, t, q, a, b) = (30.0, 1.0, 0.5, 0.0, 1.0);
        let exact = norm_bound_series(l, t, q, a, b, 1e-12).unwrap();
        assert!(!exact.closed_form);
        let ln_x: f64 = (l * t).ln();
        let ln_y2 = std::f64::consts::LN_2 + ln_x + q;
        let majorant = (1.0 - q) * (ln_y2 / (1.0 - q)).exp() - q * (1.0 - 2f64.powf(-1.0 / q)).ln();
        assert!(majorant >= exact.ln_value);

        let huge = norm_bound_series(1e6, 1.0, 0.5, 0.0, 1.0, 1e-12).unwrap();
        assert!(huge.closed_form);
        assert!(huge.ln_value.is_finite());
    }

    #[test]
    fn iterate_factor_matches_direct_evaluation() {
        let f = iterate_bound_factor(2.0, 1.0, 0.5, 0.5, 1.5, 3).unwrap();
        let direct = (2f64.powi(3) * 3f64.powf(1.5) / 6.0).ln();
        assert!((f - direct).abs() < 1e-14);
        assert_eq!(iterate_bound_factor(2.0, 1.0, 0.5, 0.5, 1.5, 0).unwrap(), 0.0);
    }

    #[test]
    fn printed_variant_with_q_zero_matches() {
        let a = printed_norm_series(1.0, 1.0, 0.0, 0.0, 1.0, 1e-15).unwrap();
        assert!((a.value() - std::f64::consts::E).abs() < 1e-14);
    }
}
