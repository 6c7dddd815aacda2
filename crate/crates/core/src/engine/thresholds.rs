use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::canonical::{canonical_assignment, KeyedSlot, KeyedUser};
use crate::market::TieKey;
use crate::money::Money;
use crate::rational::{shrunk_prefix_len, Ratio};

/// Location multiplier used when picking the price-setting pair.
pub const PRICE_LOCATION_FACTOR: u32 = 2;

/// Posted prices learnt from the observed sub-market.
///
/// `Dummy` stands for a user threshold of cost minus infinity and a slot
/// threshold of value plus infinity: nothing is ever assignable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Thresholds {
    Dummy,
    Priced { p_hat: TieKey, b_hat: TieKey },
}

impl Thresholds {
    /// Real thresholds must form a canonical pair, i.e. `c(p_hat) < v(b_hat)`.
    pub fn priced(p_hat: TieKey, b_hat: TieKey) -> Result<Self, EngineError> {
        if p_hat >= b_hat {
            return Err(EngineError::InvalidOverride(format!(
                "user threshold {} must be below slot threshold {}",
                p_hat.amount, b_hat.amount
            )));
        }
        Ok(Thresholds::Priced { p_hat, b_hat })
    }

    pub fn is_dummy(&self) -> bool {
        matches!(self, Thresholds::Dummy)
    }

    pub fn p_hat(&self) -> Option<TieKey> {
        match self {
            Thresholds::Priced { p_hat, .. } => Some(*p_hat),
            Thresholds::Dummy => None,
        }
    }

    pub fn b_hat(&self) -> Option<TieKey> {
        match self {
            Thresholds::Priced { b_hat, .. } => Some(*b_hat),
            Thresholds::Dummy => None,
        }
    }

    pub fn p_hat_cost(&self) -> Option<Money> {
        self.p_hat().map(|k| k.amount)
    }

    pub fn b_hat_value(&self) -> Option<Money> {
        self.b_hat().map(|k| k.amount)
    }

    pub fn user_assignable(&self, key: &TieKey) -> bool {
        match self {
            Thresholds::Priced { p_hat, .. } => key < p_hat,
            Thresholds::Dummy => false,
        }
    }

    pub fn slot_assignable(&self, key: &TieKey) -> bool {
        match self {
            Thresholds::Priced { b_hat, .. } => key > b_hat,
            Thresholds::Dummy => false,
        }
    }
}

/// Prices from the observed reports: the pair at location
/// `ceil((1 - 2 alpha^(1/3) / r) * |S_c(observed)|)` of the observed canonical
/// assignment, or dummies when that expression is not positive.
pub fn compute_thresholds(
    observed_users: impl IntoIterator<Item = KeyedUser>,
    observed_slots: impl IntoIterator<Item = KeyedSlot>,
    r: &Ratio,
    alpha: &Ratio,
) -> Thresholds {
    let observed = canonical_assignment(observed_users, observed_slots);
    match shrunk_prefix_len(observed.len(), PRICE_LOCATION_FACTOR, alpha, r) {
        None => Thresholds::Dummy,
        Some(location) => {
            let (user, slot) = observed.location(location).expect("location lies inside the canonical prefix");
            Thresholds::Priced { p_hat: user.key, b_hat: slot.key }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::tests::simple_instance;
    use crate::rational::parse_ratio;

    #[test]
    fn empty_observation_gives_dummies() {
        let t = compute_thresholds(vec![], vec![], &parse_ratio("0.5").unwrap(), &parse_ratio("0.001").unwrap());
        assert!(t.is_dummy());
    }

    #[test]
    fn large_alpha_gives_dummies() {
        let inst = simple_instance(&[&[1, 2]], &[(1, 9), (1, 8)]);
        let t = compute_thresholds(
            inst.keyed_users(None),
            inst.keyed_slots(None),
            &parse_ratio("0.5").unwrap(),
            &parse_ratio("0.5").unwrap(),
        );
        assert!(t.is_dummy());
    }

    #[test]
    fn small_alpha_trace() {
        // users {2, 5} vs one advertiser (cap 2, value 7); location ceil(0.6 * 2) = 2
        let inst = simple_instance(&[&[2, 5]], &[(2, 7)]);
        let t = compute_thresholds(
            inst.keyed_users(None),
            inst.keyed_slots(None),
            &parse_ratio("0.5").unwrap(),
            &parse_ratio("0.001").unwrap(),
        );
        assert_eq!(t.p_hat_cost(), Some(Money::from_units(5)));
        assert_eq!(t.b_hat_value(), Some(Money::from_units(7)));
        // the location-2 slot of a single advertiser is its second slot
        assert_eq!(t.b_hat().unwrap().within, 0);
    }

    #[test]
    fn dummy_admits_nothing() {
        let k = TieKey::new(Money::ZERO, 0, 0);
        assert!(!Thresholds::Dummy.user_assignable(&k));
        assert!(!Thresholds::Dummy.slot_assignable(&TieKey::new(Money::MAX, 0, 0)));
    }

    #[test]
    fn priced_requires_canonical_pair() {
        let lo = TieKey::new(Money::from_units(4), 0, 0);
        let hi = TieKey::new(Money::from_units(6), 1, 0);
        assert!(Thresholds::priced(lo, hi).is_ok());
        assert!(Thresholds::priced(hi, lo).is_err());
    }
}
