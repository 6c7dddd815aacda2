//! Three-sided market model: mediators own users, advertisers own slots.
//!
//! Every cost and value comparison in the crate goes through [`TieKey`], which
//! turns the numeric amounts into a strict total order using a fixed entity
//! order chosen independently of the reports.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use num::{One, Signed};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical;
use crate::money::Money;
use crate::rational::{ratio_from_usize, Ratio};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MarketError {
    #[error("tie order is not a bijection over the entities: {0}")]
    TieOrder(String),
    #[error("mediator {mediator} user {user} has negative cost {cost}")]
    NegativeCost { mediator: u32, user: u32, cost: Money },
    #[error("advertiser {advertiser} has negative value {value}")]
    NegativeValue { advertiser: u32, value: Money },
    #[error("advertiser {advertiser} has zero capacity")]
    ZeroCapacity { advertiser: u32 },
    #[error("user {0} does not exist")]
    DanglingUser(UserRef),
    #[error("slot {0} does not exist")]
    DanglingSlot(SlotRef),
    #[error("{0} appears in more than one pair")]
    DuplicatePair(String),
    #[error("the canonical assignment of the full market is empty (tau = 0)")]
    EmptyOptimum,
    #[error("report profile does not match the instance: {0}")]
    ReportShape(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Mediator,
    Advertiser,
}

/// A mediator or an advertiser. Rendered as `m3` / `a7`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId {
    pub kind: EntityKind,
    pub index: u32,
}

impl EntityId {
    pub const fn mediator(index: u32) -> Self {
        EntityId { kind: EntityKind::Mediator, index }
    }

    pub const fn advertiser(index: u32) -> Self {
        EntityId { kind: EntityKind::Advertiser, index }
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.kind {
            EntityKind::Mediator => 'm',
            EntityKind::Advertiser => 'a',
        };
        write!(f, "{tag}{}", self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed entity id {0:?} (expected m<index> or a<index>)")]
pub struct EntityIdParseError(pub String);

impl FromStr for EntityId {
    type Err = EntityIdParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || EntityIdParseError(s.to_string());
        let kind = match s.as_bytes().first() {
            Some(b'm') => EntityKind::Mediator,
            Some(b'a') => EntityKind::Advertiser,
            _ => return Err(err()),
        };
        let digits = &s[1..];
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(err());
        }
        let index = digits.parse().map_err(|_| err())?;
        Ok(EntityId { kind, index })
    }
}

impl Serialize for EntityId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EntityId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// A user, identified by its mediator and its position in that mediator's report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UserRef {
    pub mediator: u32,
    pub user: u32,
}

impl fmt::Display for UserRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}.p{}", self.mediator, self.user)
    }
}

/// One unit of an advertiser's capacity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SlotRef {
    pub advertiser: u32,
    pub slot: u32,
}

impl fmt::Display for SlotRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{}.b{}", self.advertiser, self.slot)
    }
}

/// Comparison key for costs and values.
///
/// Ordered lexicographically by `(amount, entity_rank, within)`. Equal amounts
/// are broken by the owner's position in the tie order, so a user's cost is
/// below an equal slot value exactly when the user's mediator precedes the
/// slot's advertiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TieKey {
    pub amount: Money,
    pub entity_rank: u32,
    pub within: u32,
}

impl TieKey {
    pub const fn new(amount: Money, entity_rank: u32, within: u32) -> Self {
        TieKey { amount, entity_rank, within }
    }
}

pub fn compare_keys(a: &TieKey, b: &TieKey) -> std::cmp::Ordering {
    a.cmp(b)
}

/// Fixed permutation of all entities used for tie-breaking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TieOrder {
    order: Vec<EntityId>,
    mediator_rank: Vec<u32>,
    advertiser_rank: Vec<u32>,
}

impl TieOrder {
    pub fn new(order: Vec<EntityId>, mediators: usize, advertisers: usize) -> Result<Self, MarketError> {
        if order.len() != mediators + advertisers {
            return Err(MarketError::TieOrder(format!(
                "{} entries for {} entities",
                order.len(),
                mediators + advertisers
            )));
        }
        let mut mediator_rank = vec![u32::MAX; mediators];
        let mut advertiser_rank = vec![u32::MAX; advertisers];
        for (rank, id) in order.iter().enumerate() {
            let slot = match id.kind {
                EntityKind::Mediator => mediator_rank.get_mut(id.index as usize),
                EntityKind::Advertiser => advertiser_rank.get_mut(id.index as usize),
            };
            match slot {
                Some(r) if *r == u32::MAX => *r = rank as u32,
                Some(_) => return Err(MarketError::TieOrder(format!("{id} listed twice"))),
                None => return Err(MarketError::TieOrder(format!("{id} is not an entity"))),
            }
        }
        Ok(TieOrder { order, mediator_rank, advertiser_rank })
    }

    /// Mediators first, then advertisers.
    pub fn natural(mediators: usize, advertisers: usize) -> Self {
        let order = natural_entities(mediators, advertisers);
        TieOrder::new(order, mediators, advertisers).expect("natural order is a bijection")
    }

    pub fn random<R: Rng + ?Sized>(mediators: usize, advertisers: usize, rng: &mut R) -> Self {
        let mut order = natural_entities(mediators, advertisers);
        order.shuffle(rng);
        TieOrder::new(order, mediators, advertisers).expect("shuffled order is a bijection")
    }

    pub fn order(&self) -> &[EntityId] {
        &self.order
    }

    pub fn rank(&self, id: EntityId) -> u32 {
        match id.kind {
            EntityKind::Mediator => self.mediator_rank[id.index as usize],
            EntityKind::Advertiser => self.advertiser_rank[id.index as usize],
        }
    }

    pub fn mediator_rank(&self, mediator: u32) -> u32 {
        self.mediator_rank[mediator as usize]
    }

    pub fn advertiser_rank(&self, advertiser: u32) -> u32 {
        self.advertiser_rank[advertiser as usize]
    }
}

pub(crate) fn natural_entities(mediators: usize, advertisers: usize) -> Vec<EntityId> {
    (0..mediators as u32)
        .map(EntityId::mediator)
        .chain((0..advertisers as u32).map(EntityId::advertiser))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediatorSpec {
    /// True user costs; the order defines intra-mediator tie-breaks.
    pub user_costs: Vec<Money>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdvertiserSpec {
    pub capacity: u32,
    pub value: Money,
}

/// Ground-truth market.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    mediators: Vec<MediatorSpec>,
    advertisers: Vec<AdvertiserSpec>,
    tie_order: TieOrder,
}

impl Instance {
    pub fn new(
        mediators: Vec<MediatorSpec>,
        advertisers: Vec<AdvertiserSpec>,
        tie_order: TieOrder,
    ) -> Result<Self, MarketError> {
        for (m, spec) in mediators.iter().enumerate() {
            for (p, &cost) in spec.user_costs.iter().enumerate() {
                if cost.is_negative() {
                    return Err(MarketError::NegativeCost { mediator: m as u32, user: p as u32, cost });
                }
            }
        }
        for (a, spec) in advertisers.iter().enumerate() {
            if spec.value.is_negative() {
                return Err(MarketError::NegativeValue { advertiser: a as u32, value: spec.value });
            }
            if spec.capacity == 0 {
                return Err(MarketError::ZeroCapacity { advertiser: a as u32 });
            }
        }
        if tie_order.mediator_rank.len() != mediators.len() || tie_order.advertiser_rank.len() != advertisers.len() {
            return Err(MarketError::TieOrder("tie order built for a different market".into()));
        }
        Ok(Instance { mediators, advertisers, tie_order })
    }

    pub fn mediators(&self) -> &[MediatorSpec] {
        &self.mediators
    }

    pub fn advertisers(&self) -> &[AdvertiserSpec] {
        &self.advertisers
    }

    pub fn tie_order(&self) -> &TieOrder {
        &self.tie_order
    }

    pub fn entity_count(&self) -> usize {
        self.mediators.len() + self.advertisers.len()
    }

    /// All entities, mediators first.
    pub fn entities(&self) -> Vec<EntityId> {
        natural_entities(self.mediators.len(), self.advertisers.len())
    }

    pub fn user_count(&self) -> usize {
        self.mediators.iter().map(|m| m.user_costs.len()).sum()
    }

    pub fn slot_count(&self) -> usize {
        self.advertisers.iter().map(|a| a.capacity as usize).sum()
    }

    pub fn user_key(&self, user: UserRef) -> Option<TieKey> {
        let cost = *self.mediators.get(user.mediator as usize)?.user_costs.get(user.user as usize)?;
        Some(TieKey::new(cost, self.tie_order.mediator_rank(user.mediator), user.user))
    }

    pub fn slot_key(&self, slot: SlotRef) -> Option<TieKey> {
        let spec = self.advertisers.get(slot.advertiser as usize)?;
        (slot.slot < spec.capacity)
            .then(|| TieKey::new(spec.value, self.tie_order.advertiser_rank(slot.advertiser), slot.slot))
    }

    /// Keyed users of the given mediators (all mediators when `None`).
    pub fn keyed_users(&self, mediators: Option<&[u32]>) -> Vec<canonical::KeyedUser> {
        let all: Vec<u32>;
        let ids = match mediators {
            Some(ids) => ids,
            None => {
                all = (0..self.mediators.len() as u32).collect();
                &all
            }
        };
        let mut out = Vec::new();
        for &m in ids {
            let rank = self.tie_order.mediator_rank(m);
            for (p, &cost) in self.mediators[m as usize].user_costs.iter().enumerate() {
                out.push(canonical::KeyedUser {
                    user: UserRef { mediator: m, user: p as u32 },
                    key: TieKey::new(cost, rank, p as u32),
                });
            }
        }
        out
    }

    /// Keyed slots of the given advertisers (all advertisers when `None`).
    pub fn keyed_slots(&self, advertisers: Option<&[u32]>) -> Vec<canonical::KeyedSlot> {
        let all: Vec<u32>;
        let ids = match advertisers {
            Some(ids) => ids,
            None => {
                all = (0..self.advertisers.len() as u32).collect();
                &all
            }
        };
        let mut out = Vec::new();
        for &a in ids {
            let rank = self.tie_order.advertiser_rank(a);
            let spec = self.advertisers[a as usize];
            for b in 0..spec.capacity {
                out.push(canonical::KeyedSlot {
                    slot: SlotRef { advertiser: a, slot: b },
                    key: TieKey::new(spec.value, rank, b),
                });
            }
        }
        out
    }
}

/// Source of numeric costs and values for gain-from-trade evaluation.
pub trait Market {
    fn user_cost(&self, user: UserRef) -> Option<Money>;
    fn slot_value(&self, slot: SlotRef) -> Option<Money>;
}

impl Market for Instance {
    fn user_cost(&self, user: UserRef) -> Option<Money> {
        self.user_key(user).map(|k| k.amount)
    }

    fn slot_value(&self, slot: SlotRef) -> Option<Money> {
        self.slot_key(slot).map(|k| k.amount)
    }
}

/// Which true user a reported entry stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backing {
    /// Index of a true user of the same mediator.
    Real(u32),
    /// Not one of the mediator's users; delivering it requires a substitute.
    Fabricated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportedUser {
    pub cost: Money,
    pub backing: Backing,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediatorReport {
    pub users: Vec<ReportedUser>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdvertiserReport {
    pub capacity: u32,
    pub value: Money,
}

/// What every entity declares. The mechanism sees nothing else.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportProfile {
    pub mediators: Vec<MediatorReport>,
    pub advertisers: Vec<AdvertiserReport>,
}

impl ReportProfile {
    pub fn truthful(instance: &Instance) -> Self {
        let mediators = instance
            .mediators
            .iter()
            .map(|m| MediatorReport {
                users: m
                    .user_costs
                    .iter()
                    .enumerate()
                    .map(|(i, &cost)| ReportedUser { cost, backing: Backing::Real(i as u32) })
                    .collect(),
            })
            .collect();
        let advertisers = instance
            .advertisers
            .iter()
            .map(|a| AdvertiserReport { capacity: a.capacity, value: a.value })
            .collect();
        ReportProfile { mediators, advertisers }
    }

    /// Checks type-validity against the entity set of `instance`.
    pub fn check_against(&self, instance: &Instance) -> Result<(), MarketError> {
        if self.mediators.len() != instance.mediators.len() || self.advertisers.len() != instance.advertisers.len() {
            return Err(MarketError::ReportShape(format!(
                "{} mediators / {} advertisers reported, instance has {} / {}",
                self.mediators.len(),
                self.advertisers.len(),
                instance.mediators.len(),
                instance.advertisers.len()
            )));
        }
        for (m, report) in self.mediators.iter().enumerate() {
            let truth = instance.mediators[m].user_costs.len() as u32;
            let mut seen = BTreeSet::new();
            for (p, entry) in report.users.iter().enumerate() {
                if entry.cost.is_negative() {
                    return Err(MarketError::NegativeCost { mediator: m as u32, user: p as u32, cost: entry.cost });
                }
                if let Backing::Real(idx) = entry.backing {
                    if idx >= truth || !seen.insert(idx) {
                        return Err(MarketError::ReportShape(format!(
                            "mediator {m} entry {p} is backed by user {idx}, which is missing or already used"
                        )));
                    }
                }
            }
        }
        for (a, report) in self.advertisers.iter().enumerate() {
            if report.value.is_negative() {
                return Err(MarketError::NegativeValue { advertiser: a as u32, value: report.value });
            }
        }
        Ok(())
    }

    pub fn user_key(&self, tie: &TieOrder, user: UserRef) -> Option<TieKey> {
        let entry = self.mediators.get(user.mediator as usize)?.users.get(user.user as usize)?;
        Some(TieKey::new(entry.cost, tie.mediator_rank(user.mediator), user.user))
    }

    pub fn slot_key(&self, tie: &TieOrder, slot: SlotRef) -> Option<TieKey> {
        let report = self.advertisers.get(slot.advertiser as usize)?;
        (slot.slot < report.capacity)
            .then(|| TieKey::new(report.value, tie.advertiser_rank(slot.advertiser), slot.slot))
    }

    pub fn keyed_users_of(&self, tie: &TieOrder, mediator: u32) -> Vec<canonical::KeyedUser> {
        let rank = tie.mediator_rank(mediator);
        self.mediators[mediator as usize]
            .users
            .iter()
            .enumerate()
            .map(|(p, entry)| canonical::KeyedUser {
                user: UserRef { mediator, user: p as u32 },
                key: TieKey::new(entry.cost, rank, p as u32),
            })
            .collect()
    }

    pub fn keyed_slots_of(&self, tie: &TieOrder, advertiser: u32) -> Vec<canonical::KeyedSlot> {
        let rank = tie.advertiser_rank(advertiser);
        let report = self.advertisers[advertiser as usize];
        (0..report.capacity)
            .map(|b| canonical::KeyedSlot {
                slot: SlotRef { advertiser, slot: b },
                key: TieKey::new(report.value, rank, b),
            })
            .collect()
    }
}

impl Market for ReportProfile {
    fn user_cost(&self, user: UserRef) -> Option<Money> {
        self.mediators.get(user.mediator as usize)?.users.get(user.user as usize).map(|u| u.cost)
    }

    fn slot_value(&self, slot: SlotRef) -> Option<Money> {
        let report = self.advertisers.get(slot.advertiser as usize)?;
        (slot.slot < report.capacity).then_some(report.value)
    }
}

/// A set of (user, slot) pairs in which no user and no slot repeats.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pairs: Vec<(UserRef, SlotRef)>,
}

impl Assignment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (UserRef, SlotRef)>) -> Result<Self, MarketError> {
        let mut out = Assignment::new();
        let mut users = BTreeSet::new();
        let mut slots = BTreeSet::new();
        for (user, slot) in pairs {
            if !users.insert(user) {
                return Err(MarketError::DuplicatePair(user.to_string()));
            }
            if !slots.insert(slot) {
                return Err(MarketError::DuplicatePair(slot.to_string()));
            }
            out.pairs.push((user, slot));
        }
        Ok(out)
    }

    /// Appends a pair. Callers guarantee uniqueness; checked in debug builds.
    pub(crate) fn push_unchecked(&mut self, user: UserRef, slot: SlotRef) {
        debug_assert!(self.pairs.iter().all(|(u, s)| *u != user && *s != slot));
        self.pairs.push((user, slot));
    }

    pub fn pairs(&self) -> &[(UserRef, SlotRef)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// `sum over pairs of v(b) - c(p)`.
pub fn gain_from_trade<M: Market + ?Sized>(assignment: &Assignment, market: &M) -> Result<Money, MarketError> {
    let mut total = Money::ZERO;
    for &(user, slot) in assignment.pairs() {
        let cost = market.user_cost(user).ok_or(MarketError::DanglingUser(user))?;
        let value = market.slot_value(slot).ok_or(MarketError::DanglingSlot(slot))?;
        total += value - cost;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "condition", rename_all = "snake_case")]
pub enum Violation {
    AlphaNotPositive,
    AlphaAboveOne,
    AlphaBelowInverseTau { tau: usize },
    CapacityTooLarge { advertiser: u32, capacity: u32 },
    TooManyUsers { mediator: u32, users: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::AlphaNotPositive => write!(f, "alpha must be positive"),
            Violation::AlphaAboveOne => write!(f, "alpha must be at most 1"),
            Violation::AlphaBelowInverseTau { tau } => write!(f, "alpha is below 1/tau = 1/{tau}"),
            Violation::CapacityTooLarge { advertiser, capacity } => {
                write!(f, "advertiser a{advertiser} capacity {capacity} exceeds alpha * tau")
            }
            Violation::TooManyUsers { mediator, users } => {
                write!(f, "mediator m{mediator} has {users} users, more than alpha * tau")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationReport {
    pub tau: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the market-importance promise `u(a) <= alpha * tau`, `|P(m)| <= alpha * tau`.
pub fn validate_instance(instance: &Instance, alpha: &Ratio) -> Result<ValidationReport, MarketError> {
    let tau = canonical::tau(instance);
    if tau == 0 {
        return Err(MarketError::EmptyOptimum);
    }
    let mut violations = Vec::new();
    if !alpha.is_positive() {
        violations.push(Violation::AlphaNotPositive);
    }
    if alpha > &Ratio::one() {
        violations.push(Violation::AlphaAboveOne);
    }
    let budget = alpha * ratio_from_usize(tau);
    if budget < Ratio::one() {
        violations.push(Violation::AlphaBelowInverseTau { tau });
    }
    for (a, spec) in instance.advertisers.iter().enumerate() {
        if ratio_from_usize(spec.capacity as usize) > budget {
            violations.push(Violation::CapacityTooLarge { advertiser: a as u32, capacity: spec.capacity });
        }
    }
    for (m, spec) in instance.mediators.iter().enumerate() {
        if ratio_from_usize(spec.user_costs.len()) > budget {
            violations.push(Violation::TooManyUsers { mediator: m as u32, users: spec.user_costs.len() });
        }
    }
    Ok(ValidationReport { tau, violations })
}

/// Smallest `alpha` for which `instance` satisfies the promise, if any.
pub fn minimal_alpha(instance: &Instance) -> Option<Ratio> {
    let tau = canonical::tau(instance);
    if tau == 0 {
        return None;
    }
    let largest = instance
        .advertisers
        .iter()
        .map(|a| a.capacity as usize)
        .chain(instance.mediators.iter().map(|m| m.user_costs.len()))
        .max()
        .unwrap_or(1)
        .max(1);
    if largest > tau {
        return None;
    }
    Some(Ratio::new(largest.into(), tau.into()))
}
