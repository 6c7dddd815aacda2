//! Exact fixed-point money.
//!
//! Amounts are stored as signed micro-units. Every operation is exact; parsing
//! refuses anything that does not land on the micro grid instead of rounding.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Number of micro-units in one whole unit.
pub const MICROS_PER_UNIT: i64 = 1_000_000;
const FRACTION_DIGITS: usize = 6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Money(i64);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MoneyParseError {
    #[error("empty amount")]
    Empty,
    #[error("malformed amount {0:?}")]
    Malformed(String),
    #[error("amount {0:?} is finer than the money grid (at most 6 fractional digits)")]
    TooPrecise(String),
    #[error("amount {0:?} is out of range")]
    Overflow(String),
}

impl Money {
    pub const ZERO: Money = Money(0);
    /// One grid step.
    pub const MICRO: Money = Money(1);
    pub const MAX: Money = Money(i64::MAX);

    pub const fn from_micros(micros: i64) -> Self {
        Money(micros)
    }

    pub const fn from_units(units: i64) -> Self {
        Money(units * MICROS_PER_UNIT)
    }

    pub const fn micros(self) -> i64 {
        self.0
    }

    pub fn is_negative(self) -> bool {
        self.0 < 0
    }

    pub fn checked_add(self, other: Money) -> Option<Money> {
        self.0.checked_add(other.0).map(Money)
    }

    pub fn checked_mul(self, factor: i64) -> Option<Money> {
        self.0.checked_mul(factor).map(Money)
    }

    /// Halves the amount, rounding toward zero on the micro grid.
    pub fn half(self) -> Money {
        Money(self.0 / 2)
    }

    /// Lossy conversion for statistics and reporting only.
    pub fn to_f64(self) -> f64 {
        self.0 as f64 / MICROS_PER_UNIT as f64
    }

    /// Snaps a real number onto a grid of `step` (rounding to nearest step).
    pub fn quantize(x: f64, step: Money) -> Money {
        let step = step.0.max(1);
        let micros = x * MICROS_PER_UNIT as f64;
        let steps = (micros / step as f64).round();
        Money((steps as i64).saturating_mul(step))
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        let whole = abs / MICROS_PER_UNIT as u64;
        let frac = abs % MICROS_PER_UNIT as u64;
        if frac == 0 {
            write!(f, "{sign}{whole}")
        } else {
            let digits = format!("{frac:06}");
            write!(f, "{sign}{whole}.{}", digits.trim_end_matches('0'))
        }
    }
}

impl FromStr for Money {
    type Err = MoneyParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let text = s.trim();
        if text.is_empty() {
            return Err(MoneyParseError::Empty);
        }
        let malformed = || MoneyParseError::Malformed(s.to_string());
        let (negative, body) = match text.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, text.strip_prefix('+').unwrap_or(text)),
        };
        let (whole, frac) = match body.split_once('.') {
            Some((w, f)) => (w, f),
            None => (body, ""),
        };
        if whole.is_empty() && frac.is_empty() {
            return Err(malformed());
        }
        if !whole.bytes().all(|b| b.is_ascii_digit()) || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(malformed());
        }
        if body.contains('.') && frac.is_empty() {
            return Err(malformed());
        }
        // Trailing zeros beyond the grid are exact; anything else would need rounding.
        let significant = frac.trim_end_matches('0');
        if significant.len() > FRACTION_DIGITS {
            return Err(MoneyParseError::TooPrecise(s.to_string()));
        }
        let overflow = || MoneyParseError::Overflow(s.to_string());
        let whole: i64 = if whole.is_empty() { 0 } else { whole.parse().map_err(|_| overflow())? };
        let mut frac_micros: i64 = 0;
        for (i, b) in significant.bytes().enumerate() {
            frac_micros += i64::from(b - b'0') * 10_i64.pow((FRACTION_DIGITS - 1 - i) as u32);
        }
        let micros = whole
            .checked_mul(MICROS_PER_UNIT)
            .and_then(|w| w.checked_add(frac_micros))
            .ok_or_else(overflow)?;
        Ok(Money(if negative { -micros } else { micros }))
    }
}

impl Serialize for Money {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Money {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        // Amounts travel as strings so that no float ever touches them.
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

impl Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl Sub for Money {
    type Output = Money;
    fn sub(self, rhs: Money) -> Money {
        Money(self.0 - rhs.0)
    }
}

impl Neg for Money {
    type Output = Money;
    fn neg(self) -> Money {
        Money(-self.0)
    }
}

impl Mul<i64> for Money {
    type Output = Money;
    fn mul(self, rhs: i64) -> Money {
        Money(self.0 * rhs)
    }
}

impl AddAssign for Money {
    fn add_assign(&mut self, rhs: Money) {
        self.0 += rhs.0;
    }
}

impl SubAssign for Money {
    fn sub_assign(&mut self, rhs: Money) {
        self.0 -= rhs.0;
    }
}

impl Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        iter.fold(Money::ZERO, Add::add)
    }
}

impl<'a> Sum<&'a Money> for Money {
    fn sum<I: Iterator<Item = &'a Money>>(iter: I) -> Money {
        iter.copied().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_exact_decimals() {
        assert_eq!("1.5".parse::<Money>().unwrap(), Money::from_micros(1_500_000));
        assert_eq!("-0.000001".parse::<Money>().unwrap(), Money::from_micros(-1));
        assert_eq!("7".parse::<Money>().unwrap(), Money::from_units(7));
        assert_eq!(".25".parse::<Money>().unwrap(), Money::from_micros(250_000));
        assert_eq!("2.5000000".parse::<Money>().unwrap(), Money::from_micros(2_500_000));
    }

    #[test]
    fn rejects_sub_grid_precision() {
        assert!(matches!("0.0000001".parse::<Money>(), Err(MoneyParseError::TooPrecise(_))));
        assert!(matches!("1.2345678".parse::<Money>(), Err(MoneyParseError::TooPrecise(_))));
    }

    #[test]
    fn rejects_garbage() {
        for bad in ["", "abc", "1.", "1e3", "--1", "1.2.3", "."] {
            assert!(bad.parse::<Money>().is_err(), "{bad:?} should not parse");
        }
        assert!(matches!("99999999999999999999".parse::<Money>(), Err(MoneyParseError::Overflow(_))));
    }

    #[test]
    fn display_is_canonical() {
        assert_eq!(Money::from_micros(1_500_000).to_string(), "1.5");
        assert_eq!(Money::from_micros(-250_000).to_string(), "-0.25");
        assert_eq!(Money::from_units(3).to_string(), "3");
        assert_eq!(Money::ZERO.to_string(), "0");
    }

    proptest! {
        #[test]
        fn display_parse_round_trip(micros in any::<i64>().prop_filter("min", |m| *m != i64::MIN)) {
            let money = Money::from_micros(micros);
            prop_assert_eq!(money.to_string().parse::<Money>().unwrap(), money);
        }
    }
}
