//! Offline optimum: the sort-and-zip canonical assignment, `tau`, and an
//! exhaustive oracle used to cross-check it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::{Assignment, Instance, SlotRef, TieKey, UserRef};
use crate::money::Money;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyedUser {
    pub user: UserRef,
    pub key: TieKey,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyedSlot {
    pub slot: SlotRef,
    pub key: TieKey,
}

/// Users sorted by increasing cost, slots by decreasing value, and the retained
/// prefix of zipped pairs. Locations are 1-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CanonicalAssignment {
    sorted_users: Vec<KeyedUser>,
    sorted_slots: Vec<KeyedSlot>,
    size: usize,
}

impl CanonicalAssignment {
    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn sorted_users(&self) -> &[KeyedUser] {
        &self.sorted_users
    }

    pub fn sorted_slots(&self) -> &[KeyedSlot] {
        &self.sorted_slots
    }

    /// Pair at `location` (1-based), if it is retained.
    pub fn location(&self, location: usize) -> Option<(KeyedUser, KeyedSlot)> {
        if location == 0 || location > self.size {
            return None;
        }
        Some((self.sorted_users[location - 1], self.sorted_slots[location - 1]))
    }

    pub fn pairs(&self) -> impl Iterator<Item = (KeyedUser, KeyedSlot)> + '_ {
        self.sorted_users[..self.size].iter().copied().zip(self.sorted_slots[..self.size].iter().copied())
    }

    pub fn matched_users(&self) -> &[KeyedUser] {
        &self.sorted_users[..self.size]
    }

    pub fn matched_slots(&self) -> &[KeyedSlot] {
        &self.sorted_slots[..self.size]
    }

    pub fn gain_from_trade(&self) -> Money {
        self.pairs().map(|(u, s)| s.key.amount - u.key.amount).sum()
    }

    pub fn assignment(&self) -> Assignment {
        let mut out = Assignment::new();
        for (u, s) in self.pairs() {
            out.push_unchecked(u.user, s.slot);
        }
        out
    }
}

pub fn canonical_assignment(
    users: impl IntoIterator<Item = KeyedUser>,
    slots: impl IntoIterator<Item = KeyedSlot>,
) -> CanonicalAssignment {
    let mut sorted_users: Vec<KeyedUser> = users.into_iter().collect();
    let mut sorted_slots: Vec<KeyedSlot> = slots.into_iter().collect();
    sorted_users.sort_unstable_by_key(|u| u.key);
    sorted_slots.sort_unstable_by_key(|s| std::cmp::Reverse(s.key));
    // Costs rise and values fall along the zip, so the first failure ends it.
    let size = sorted_users
        .iter()
        .zip(&sorted_slots)
        .take_while(|(u, s)| s.key > u.key)
        .count();
    CanonicalAssignment { sorted_users, sorted_slots, size }
}

pub fn full_canonical(instance: &Instance) -> CanonicalAssignment {
    canonical_assignment(instance.keyed_users(None), instance.keyed_slots(None))
}

/// Size of the canonical assignment over the whole true market.
pub fn tau(instance: &Instance) -> usize {
    full_canonical(instance).len()
}

pub const ORACLE_LIMIT: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("brute-force oracle supports at most {ORACLE_LIMIT} users and {ORACLE_LIMIT} slots (got {users} x {slots})")]
pub struct OracleTooLarge {
    pub users: usize,
    pub slots: usize,
}

/// Maximum gain from trade over every (partial) matching, by exhaustive search.
///
/// Works on raw amounts only so it shares nothing with the key-based sorter.
pub fn brute_force_optimal_gft(costs: &[Money], values: &[Money]) -> Result<Money, OracleTooLarge> {
    if costs.len() > ORACLE_LIMIT || values.len() > ORACLE_LIMIT {
        return Err(OracleTooLarge { users: costs.len(), slots: values.len() });
    }
    fn search(costs: &[Money], values: &[Money], used: u32) -> Money {
        let Some((&cost, rest)) = costs.split_first() else {
            return Money::ZERO;
        };
        let mut best = search(rest, values, used);
        for (j, &value) in values.iter().enumerate() {
            if used & (1 << j) == 0 {
                let gain = value - cost + search(rest, values, used | (1 << j));
                best = best.max(gain);
            }
        }
        best
    }
    Ok(search(costs, values, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::tests::{simple_instance, units};
    use crate::market::{gain_from_trade, AdvertiserSpec, MediatorSpec, TieOrder};
    use proptest::prelude::*;

    fn single_side(costs: &[i64], values: &[i64]) -> (Vec<KeyedUser>, Vec<KeyedSlot>) {
        let inst = simple_instance(&[costs], &values.iter().map(|&v| (1, v)).collect::<Vec<_>>());
        (inst.keyed_users(None), inst.keyed_slots(None))
    }

    #[test]
    fn no_users_means_empty() {
        let (users, slots) = single_side(&[], &[5]);
        assert!(canonical_assignment(users, slots).is_empty());
    }

    #[test]
    fn zip_stops_at_first_loss() {
        let (users, slots) = single_side(&[6, 1, 3], &[2, 5, 4]);
        let c = canonical_assignment(users, slots);
        assert_eq!(c.len(), 2);
        let amounts: Vec<_> = c.pairs().map(|(u, s)| (u.key.amount, s.key.amount)).collect();
        assert_eq!(amounts, vec![(Money::from_units(1), Money::from_units(5)), (Money::from_units(3), Money::from_units(4))]);
        assert_eq!(c.gain_from_trade(), Money::from_units(5));
        assert_eq!(brute_force_optimal_gft(&units(&[1, 3, 6]), &units(&[5, 4, 2])).unwrap(), Money::from_units(5));
    }

    #[test]
    fn two_by_two() {
        let (users, slots) = single_side(&[1, 2], &[10, 9]);
        let c = canonical_assignment(users, slots);
        assert_eq!((c.len(), c.gain_from_trade()), (2, Money::from_units(16)));
        assert_eq!(brute_force_optimal_gft(&units(&[1, 2]), &units(&[10, 9])).unwrap(), Money::from_units(16));
    }

    #[test]
    fn tau_examples() {
        assert_eq!(tau(&simple_instance(&[&[9, 8]], &[(2, 3)])), 0);
        assert_eq!(tau(&simple_instance(&[&[1, 2, 3, 4]], &[(1, 10), (1, 9), (1, 8), (1, 0)])), 3);
        assert_eq!(tau(&simple_instance(&[&[1]], &[(3, 5)])), 1);
    }

    #[test]
    fn oracle_edge_cases() {
        assert_eq!(brute_force_optimal_gft(&[], &units(&[3])).unwrap(), Money::ZERO);
        assert_eq!(brute_force_optimal_gft(&units(&[7]), &units(&[5])).unwrap(), Money::ZERO);
        assert!(brute_force_optimal_gft(&units(&[1; 9]), &units(&[1])).is_err());
    }

    #[test]
    fn location_lookup_is_one_based() {
        let (users, slots) = single_side(&[1, 3, 6], &[5, 4, 2]);
        let c = canonical_assignment(users, slots);
        assert!(c.location(0).is_none());
        assert_eq!(c.location(1).unwrap().0.key.amount, Money::from_units(1));
        assert_eq!(c.location(2).unwrap().1.key.amount, Money::from_units(4));
        assert!(c.location(3).is_none());
    }

    fn arb_market() -> impl Strategy<Value = Instance> {
        (
            prop::collection::vec(prop::collection::vec(0i64..12, 0..3), 1..4),
            prop::collection::vec((1u32..3, 0i64..12), 1..4),
            any::<u64>(),
        )
            .prop_map(|(meds, advs, seed)| {
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                Instance::new(
                    meds.iter().map(|c| MediatorSpec { user_costs: units(c) }).collect(),
                    advs.iter().map(|&(capacity, v)| AdvertiserSpec { capacity, value: Money::from_units(v) }).collect(),
                    TieOrder::random(meds.len(), advs.len(), &mut rng),
                )
                .unwrap()
            })
    }

    proptest! {
        #[test]
        fn prefix_is_monotone(inst in arb_market()) {
            let c = full_canonical(&inst);
            let pairs: Vec<_> = c.pairs().collect();
            for w in pairs.windows(2) {
                prop_assert!(w[0].0.key < w[1].0.key);
                prop_assert!(w[0].1.key > w[1].1.key);
                prop_assert!(w[0].0.key.amount <= w[1].0.key.amount);
                prop_assert!(w[0].1.key.amount >= w[1].1.key.amount);
            }
            for (u, s) in &pairs {
                prop_assert!(s.key > u.key);
            }
            if let (Some(u), Some(s)) = (c.sorted_users().get(c.len()), c.sorted_slots().get(c.len())) {
                prop_assert!(s.key < u.key);
            }
        }

        #[test]
        fn input_order_is_irrelevant(inst in arb_market(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut users = inst.keyed_users(None);
            let mut slots = inst.keyed_slots(None);
            let base = canonical_assignment(users.clone(), slots.clone());
            users.shuffle(&mut rng);
            slots.shuffle(&mut rng);
            prop_assert_eq!(canonical_assignment(users, slots), base);
        }

        #[test]
        fn matches_oracle_and_gft(inst in arb_market()) {
            let c = full_canonical(&inst);
            let costs: Vec<Money> = inst.mediators().iter().flat_map(|m| m.user_costs.iter().copied()).collect();
            let values: Vec<Money> = inst.advertisers().iter().flat_map(|a| std::iter::repeat_n(a.value, a.capacity as usize)).collect();
            prop_assume!(costs.len() <= ORACLE_LIMIT && values.len() <= ORACLE_LIMIT);
            prop_assert_eq!(c.gain_from_trade(), brute_force_optimal_gft(&costs, &values).unwrap());
            prop_assert_eq!(gain_from_trade(&c.assignment(), &inst).unwrap(), c.gain_from_trade());
        }
    }
}
