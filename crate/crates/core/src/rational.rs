//! Exact rational arithmetic for the market-size parameters.
//!
//! The mechanism only ever needs cube roots and sixth roots of `alpha` inside
//! comparisons, so every decision is made by raising the other side to the
//! matching power instead of taking a floating-point root.

use std::str::FromStr;

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{One, Signed, ToPrimitive, Zero};
use thiserror::Error;

pub type Ratio = BigRational;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed rational {0:?} (expected an integer, decimal, or p/q)")]
pub struct RatioParseError(pub String);

/// Parses `"3"`, `"0.0125"`, `"1/80"` or `"1e-3"` without loss.
pub fn parse_ratio(text: &str) -> Result<Ratio, RatioParseError> {
    let err = || RatioParseError(text.to_string());
    let s = text.trim();
    if let Some((num, den)) = s.split_once('/') {
        let num = BigInt::from_str(num.trim()).map_err(|_| err())?;
        let den = BigInt::from_str(den.trim()).map_err(|_| err())?;
        if den.is_zero() {
            return Err(err());
        }
        return Ok(Ratio::new(num, den));
    }
    let (mantissa, exponent) = match s.split_once(['e', 'E']) {
        Some((m, e)) => (m, e.parse::<i32>().map_err(|_| err())?),
        None => (s, 0),
    };
    let (negative, body) = match mantissa.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, mantissa),
    };
    let (whole, frac) = body.split_once('.').unwrap_or((body, ""));
    if (whole.is_empty() && frac.is_empty())
        || !whole.bytes().all(|b| b.is_ascii_digit())
        || !frac.bytes().all(|b| b.is_ascii_digit())
    {
        return Err(err());
    }
    let digits = format!("{whole}{frac}");
    let mut value = Ratio::new(BigInt::from_str(&digits).map_err(|_| err())?, pow10(frac.len() as u32));
    let shift = pow10(exponent.unsigned_abs());
    if exponent >= 0 {
        value *= Ratio::from_integer(shift);
    } else {
        value /= Ratio::from_integer(shift);
    }
    Ok(if negative { -value } else { value })
}

fn pow10(exp: u32) -> BigInt {
    num::pow(BigInt::from(10), exp as usize)
}

/// Canonical text form: `"p"` or `"p/q"` in lowest terms.
pub fn format_ratio(value: &Ratio) -> String {
    if value.is_integer() {
        value.numer().to_string()
    } else {
        format!("{}/{}", value.numer(), value.denom())
    }
}

pub fn ratio_to_f64(value: &Ratio) -> f64 {
    value.to_f64().unwrap_or(f64::NAN)
}

pub fn ratio_from_usize(n: usize) -> Ratio {
    Ratio::from_integer(BigInt::from(n))
}

pub fn one_half() -> Ratio {
    Ratio::new(BigInt::one(), BigInt::from(2))
}

/// `x <= alpha^(1/3)`, decided exactly.
pub fn at_most_cube_root(x: &Ratio, alpha: &Ratio) -> bool {
    if !x.is_positive() {
        return true;
    }
    &(x * x * x) <= alpha
}

/// Length of the shrunk prefix `ceil((1 - factor * alpha^(1/3) / r) * n)`, or
/// `None` when the bracketed expression is not positive.
///
/// With `x = factor * n * alpha^(1/3) / r` the prefix is `n - floor(x)`, and
/// `floor(x)` is the largest `j` with `(j * r / (factor * n))^3 <= alpha`.
pub fn shrunk_prefix_len(n: usize, factor: u32, alpha: &Ratio, r: &Ratio) -> Option<usize> {
    if n == 0 {
        return None;
    }
    let factor = Ratio::from_integer(BigInt::from(factor));
    // Positive iff alpha^(1/3) < r / factor.
    let cutoff = r / &factor;
    if at_most_cube_root(&cutoff, alpha) {
        return None;
    }
    let scale = r / (factor * ratio_from_usize(n));
    let fits = |j: usize| at_most_cube_root(&(&scale * ratio_from_usize(j)), alpha);
    // floor(x) < n here, so search the largest j in [0, n) with fits(j).
    let (mut lo, mut hi) = (0usize, n - 1);
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    Some(n - lo)
}

/// `|count - r * total| <= alpha^(1/3) * tau`, decided exactly.
pub fn within_cube_root_band(count: usize, total: usize, r: &Ratio, alpha: &Ratio, tau: usize) -> bool {
    if tau == 0 {
        return ratio_from_usize(count) == r * ratio_from_usize(total);
    }
    let deviation = (ratio_from_usize(count) - r * ratio_from_usize(total)).abs();
    at_most_cube_root(&(deviation / ratio_from_usize(tau)), alpha)
}

/// Grid used when an irrational parameter must be materialised.
pub const R_GRID: i64 = 1_000_000;

/// `min{1/2, 4 * alpha^(1/6)}`, rounded toward zero onto a `1e-6` grid.
pub fn derive_r(alpha: &Ratio) -> Option<Ratio> {
    if !alpha.is_positive() || alpha > &Ratio::one() {
        return None;
    }
    let half = one_half();
    // 4 * alpha^(1/6) >= 1/2  <=>  alpha >= 8^-6
    let crossover = Ratio::new(BigInt::one(), BigInt::from(8).pow(6u32));
    if alpha >= &crossover {
        return Some(half);
    }
    // Largest q with q / (4 * GRID) <= alpha^(1/6).
    let grid = Ratio::from_integer(BigInt::from(4 * R_GRID));
    let fits = |q: i64| {
        let x = Ratio::from_integer(BigInt::from(q)) / &grid;
        let sixth = num::pow(x, 6);
        &sixth <= alpha
    };
    let (mut lo, mut hi) = (0i64, R_GRID / 2);
    while lo < hi {
        let mid = lo + (hi - lo + 1) / 2;
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    Some(Ratio::new(BigInt::from(lo), BigInt::from(R_GRID)))
}

pub mod serde_ratio {
    //! Serialises a [`Ratio`](super::Ratio) as its canonical string.
    use super::{format_ratio, parse_ratio, Ratio};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &Ratio, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&format_ratio(value))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Ratio, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_ratio(&text).map_err(serde::de::Error::custom)
    }
}
