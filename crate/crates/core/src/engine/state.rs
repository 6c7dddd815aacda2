use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::thresholds::{compute_thresholds, Thresholds};
use super::{EngineError, EngineVariant};
use crate::canonical::KeyedUser;
use crate::market::{Assignment, EntityId, EntityKind, ReportProfile, SlotRef, TieKey, TieOrder, UserRef};
use crate::money::Money;
use crate::rational::Ratio;

/// An amount together with the key it was read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Price {
    pub amount: Money,
    pub key: TieKey,
}

/// A user's cumulative recommended payment moving from `previous` to `cumulative`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetUpdate {
    pub user: UserRef,
    pub previous: Money,
    pub cumulative: Money,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetEntry {
    pub user: UserRef,
    pub cumulative: Money,
}

/// One executed match, with the payment updates made for its mediator right away.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trade {
    pub user: UserRef,
    pub slot: SlotRef,
    /// Charged to the slot's advertiser.
    pub charge: Price,
    /// Paid to the user's mediator.
    pub payment: Price,
    pub target_updates: Vec<TargetUpdate>,
}

/// Everything that happened while one post-observation entity was processed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrivalSnapshot {
    pub entity: EntityId,
    pub trades: Vec<Trade>,
    /// Changes made by the end-of-arrival pass over every mediator.
    pub target_updates: Vec<TargetUpdate>,
    /// Every assigned user's cumulative target after this arrival.
    pub user_targets: Vec<TargetEntry>,
    /// Unassigned assignable users of arrived mediators.
    pub open_users: usize,
    /// Unassigned assignable slots of arrived advertisers.
    pub open_slots: usize,
}

#[derive(Debug, Default)]
struct UserPool {
    users: Vec<KeyedUser>,
    next: usize,
}

impl UserPool {
    fn peek(&self) -> Option<&KeyedUser> {
        self.users.get(self.next)
    }

    fn pop(&mut self) -> Option<KeyedUser> {
        let user = self.users.get(self.next).copied();
        self.next += usize::from(user.is_some());
        user
    }

    fn remaining(&self) -> usize {
        self.users.len() - self.next
    }
}

#[derive(Debug, Default)]
struct SlotPool {
    slots: Vec<u32>,
    next: usize,
}

impl SlotPool {
    fn pop(&mut self) -> Option<u32> {
        let slot = self.slots.get(self.next).copied();
        self.next += usize::from(slot.is_some());
        slot
    }

    fn remaining(&self) -> usize {
        self.slots.len() - self.next
    }
}

/// Sequential state of one run. Entities are first observed, then the
/// observation phase is closed and the remaining arrivals trade.
pub struct MechanismState<'a> {
    reports: &'a ReportProfile,
    tie: &'a TieOrder,
    variant: EngineVariant,
    thresholds: Option<Thresholds>,
    seen_mediators: Vec<bool>,
    seen_advertisers: Vec<bool>,
    observed_mediators: Vec<u32>,
    observed_advertisers: Vec<u32>,
    sigma: Vec<EntityId>,
    sigma_mediators: Vec<u32>,
    user_pools: Vec<UserPool>,
    slot_pools: Vec<SlotPool>,
    // sigma-ordered entities that may still have open users / slots
    mediator_queue: VecDeque<u32>,
    advertiser_queue: VecDeque<u32>,
    assigned: Vec<Vec<u32>>,
    targets: BTreeMap<UserRef, Money>,
    charges: Vec<Money>,
    receipts: Vec<Money>,
    assignment: Assignment,
    open_users: usize,
    open_slots: usize,
    snapshots: Vec<ArrivalSnapshot>,
}

impl<'a> MechanismState<'a> {
    pub fn new(reports: &'a ReportProfile, tie: &'a TieOrder, variant: EngineVariant) -> Self {
        let n_m = reports.mediators.len();
        let n_a = reports.advertisers.len();
        MechanismState {
            reports,
            tie,
            variant,
            thresholds: None,
            seen_mediators: vec![false; n_m],
            seen_advertisers: vec![false; n_a],
            observed_mediators: Vec::new(),
            observed_advertisers: Vec::new(),
            sigma: Vec::new(),
            sigma_mediators: Vec::new(),
            user_pools: (0..n_m).map(|_| UserPool::default()).collect(),
            slot_pools: (0..n_a).map(|_| SlotPool::default()).collect(),
            mediator_queue: VecDeque::new(),
            advertiser_queue: VecDeque::new(),
            assigned: vec![Vec::new(); n_m],
            targets: BTreeMap::new(),
            charges: vec![Money::ZERO; n_a],
            receipts: vec![Money::ZERO; n_m],
            assignment: Assignment::new(),
            open_users: 0,
            open_slots: 0,
            snapshots: Vec::new(),
        }
    }

    fn mark_seen(&mut self, entity: EntityId) -> Result<(), EngineError> {
        let seen = match entity.kind {
            EntityKind::Mediator => self.seen_mediators.get_mut(entity.index as usize),
            EntityKind::Advertiser => self.seen_advertisers.get_mut(entity.index as usize),
        }
        .ok_or(EngineError::UnknownEntity(entity))?;
        if *seen {
            return Err(EngineError::EntityAlreadyProcessed(entity));
        }
        *seen = true;
        Ok(())
    }

    /// Records an entity of the observation phase. It will never trade.
    pub fn observe(&mut self, entity: EntityId) -> Result<(), EngineError> {
        if self.thresholds.is_some() {
            return Err(EngineError::ObservationClosed);
        }
        self.mark_seen(entity)?;
        match entity.kind {
            EntityKind::Mediator => self.observed_mediators.push(entity.index),
            EntityKind::Advertiser => self.observed_advertisers.push(entity.index),
        }
        Ok(())
    }

    pub fn observed_mediators(&self) -> &[u32] {
        &self.observed_mediators
    }

    pub fn observed_advertisers(&self) -> &[u32] {
        &self.observed_advertisers
    }

    /// Ends the observation phase with thresholds learnt from observed reports.
    pub fn close_observation(&mut self, r: &Ratio, alpha: &Ratio) -> Result<Thresholds, EngineError> {
        let users = self.observed_mediators.iter().flat_map(|&m| self.reports.keyed_users_of(self.tie, m));
        let slots = self.observed_advertisers.iter().flat_map(|&a| self.reports.keyed_slots_of(self.tie, a));
        let thresholds = compute_thresholds(users.collect::<Vec<_>>(), slots.collect::<Vec<_>>(), r, alpha);
        self.close_with(thresholds)?;
        Ok(thresholds)
    }

    /// Ends the observation phase with externally supplied thresholds.
    pub fn close_with(&mut self, thresholds: Thresholds) -> Result<(), EngineError> {
        if self.thresholds.is_some() {
            return Err(EngineError::ObservationClosed);
        }
        self.thresholds = Some(thresholds);
        Ok(())
    }

    pub fn thresholds(&self) -> Option<Thresholds> {
        self.thresholds
    }

    /// Adds `entity` to the arrival sequence and runs the matching loop and the
    /// payment-recommendation pass for it.
    pub fn process_arrival(&mut self, entity: EntityId) -> Result<&ArrivalSnapshot, EngineError> {
        let thresholds = self.thresholds.ok_or(EngineError::ObservationOpen)?;
        self.mark_seen(entity)?;
        self.sigma.push(entity);
        let mut trades = Vec::new();
        match entity.kind {
            EntityKind::Mediator => {
                let m = entity.index;
                let mut pool: Vec<KeyedUser> = self
                    .reports
                    .keyed_users_of(self.tie, m)
                    .into_iter()
                    .filter(|u| thresholds.user_assignable(&u.key))
                    .collect();
                pool.sort_unstable_by_key(|u| u.key);
                self.open_users += pool.len();
                self.user_pools[m as usize] = UserPool { users: pool, next: 0 };
                self.sigma_mediators.push(m);
                while self.user_pools[m as usize].remaining() > 0 {
                    let Some(a) = self.front_advertiser() else { break };
                    trades.push(self.trade(m, a, &thresholds));
                }
                if self.user_pools[m as usize].remaining() > 0 {
                    self.mediator_queue.push_back(m);
                }
            }
            EntityKind::Advertiser => {
                let a = entity.index;
                let slots: Vec<u32> = self
                    .reports
                    .keyed_slots_of(self.tie, a)
                    .into_iter()
                    .filter(|s| thresholds.slot_assignable(&s.key))
                    .map(|s| s.slot.slot)
                    .collect();
                self.open_slots += slots.len();
                self.slot_pools[a as usize] = SlotPool { slots, next: 0 };
                while self.slot_pools[a as usize].remaining() > 0 {
                    let Some(m) = self.front_mediator() else { break };
                    trades.push(self.trade(m, a, &thresholds));
                }
                if self.slot_pools[a as usize].remaining() > 0 {
                    self.advertiser_queue.push_back(a);
                }
            }
        }
        let mut target_updates = Vec::new();
        if self.variant != EngineVariant::SkipPaymentUpdates {
            for i in 0..self.sigma_mediators.len() {
                let m = self.sigma_mediators[i];
                target_updates.extend(self.refresh_targets(m, &thresholds));
            }
        }
        let user_targets = self
            .targets
            .iter()
            .map(|(&user, &cumulative)| TargetEntry { user, cumulative })
            .collect();
        self.snapshots.push(ArrivalSnapshot {
            entity,
            trades,
            target_updates,
            user_targets,
            open_users: self.open_users,
            open_slots: self.open_slots,
        });
        Ok(self.snapshots.last().expect("just pushed"))
    }

    fn front_advertiser(&mut self) -> Option<u32> {
        while let Some(&a) = self.advertiser_queue.front() {
            if self.slot_pools[a as usize].remaining() > 0 {
                return Some(a);
            }
            self.advertiser_queue.pop_front();
        }
        None
    }

    fn front_mediator(&mut self) -> Option<u32> {
        while let Some(&m) = self.mediator_queue.front() {
            if self.user_pools[m as usize].remaining() > 0 {
                return Some(m);
            }
            self.mediator_queue.pop_front();
        }
        None
    }

    fn trade(&mut self, m: u32, a: u32, thresholds: &Thresholds) -> Trade {
        let (p_hat, b_hat) = match thresholds {
            Thresholds::Priced { p_hat, b_hat } => (*p_hat, *b_hat),
            Thresholds::Dummy => unreachable!("dummy thresholds admit no trade"),
        };
        let user = self.user_pools[m as usize].pop().expect("caller checked open users").user;
        let slot = SlotRef { advertiser: a, slot: self.slot_pools[a as usize].pop().expect("caller checked open slots") };
        self.open_users -= 1;
        self.open_slots -= 1;
        let charge = Price { amount: b_hat.amount, key: b_hat };
        let payment = match self.variant {
            EngineVariant::PaySlotPrice => charge,
            _ => Price { amount: p_hat.amount, key: p_hat },
        };
        self.charges[a as usize] += charge.amount;
        self.receipts[m as usize] += payment.amount;
        self.assigned[m as usize].push(user.user);
        self.assignment.push_unchecked(user, slot);
        let target_updates = match self.variant {
            EngineVariant::SkipPaymentUpdates => Vec::new(),
            _ => self.refresh_targets(m, thresholds),
        };
        Trade { user, slot, charge, payment, target_updates }
    }

    /// Raises every assigned user of `m` to the cost of m's cheapest open
    /// assignable user, or to `c(p_hat)` once none is left.
    fn refresh_targets(&mut self, m: u32, thresholds: &Thresholds) -> Vec<TargetUpdate> {
        let Some(p_hat) = thresholds.p_hat() else {
            return Vec::new();
        };
        let target = match self.user_pools[m as usize].peek() {
            Some(next) => next.key.amount,
            None => p_hat.amount,
        };
        let mut updates = Vec::new();
        for &p in &self.assigned[m as usize] {
            let user = UserRef { mediator: m, user: p };
            let previous = self.targets.get(&user).copied().unwrap_or(Money::ZERO);
            if previous != target {
                self.targets.insert(user, target);
                updates.push(TargetUpdate { user, previous, cumulative: target });
            }
        }
        updates
    }

    pub fn snapshots(&self) -> &[ArrivalSnapshot] {
        &self.snapshots
    }

    pub fn assignment(&self) -> &Assignment {
        &self.assignment
    }

    pub fn charges(&self) -> &[Money] {
        &self.charges
    }

    pub fn receipts(&self) -> &[Money] {
        &self.receipts
    }

    pub fn sigma(&self) -> &[EntityId] {
        &self.sigma
    }

    pub(super) fn into_parts(self) -> StateParts {
        StateParts {
            observed_mediators: self.observed_mediators,
            observed_advertisers: self.observed_advertisers,
            assignment: self.assignment,
            charges: self.charges,
            receipts: self.receipts,
            user_targets: self.targets.into_iter().map(|(user, cumulative)| TargetEntry { user, cumulative }).collect(),
            snapshots: self.snapshots,
        }
    }
}

pub(super) struct StateParts {
    pub observed_mediators: Vec<u32>,
    pub observed_advertisers: Vec<u32>,
    pub assignment: Assignment,
    pub charges: Vec<Money>,
    pub receipts: Vec<Money>,
    pub user_targets: Vec<TargetEntry>,
    pub snapshots: Vec<ArrivalSnapshot>,
}
