//! Utilities under true parameters and audits of the mechanism's economic
//! guarantees: continuous individual rationality, budget balance, the surplus
//! invariant, online legality and payment-stream monotonicity.

mod misreport;
mod sweep;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use sweep::{run_sweep, verification_family, Check, RoleTally, SweepConfig, SweepError, SweepReport, Violation};
pub use misreport::{
    deviation_test, generate_misreports, CaseRuns, DeviationCase, Misreport, PairedRunner, SeedVerdict,
};

use crate::engine::{MechanismOutcome, Thresholds};
use crate::market::{Backing, EntityId, EntityKind, Instance, ReportProfile, UserRef};
use crate::money::Money;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EconError {
    #[error("{0} is not a player of this market")]
    UnknownPlayer(PlayerRef),
    #[error("misreport kind does not match {0}")]
    MisreportKind(PlayerRef),
    #[error("mediator m{0} cannot deliver a user for every assigned entry")]
    Undeliverable(u32),
    #[error(transparent)]
    Engine(#[from] crate::engine::EngineError),
}

/// A strategic player. Users are named by their true index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum PlayerRef {
    User { mediator: u32, user: u32 },
    Mediator { index: u32 },
    Advertiser { index: u32 },
}

impl PlayerRef {
    pub fn user(user: UserRef) -> Self {
        PlayerRef::User { mediator: user.mediator, user: user.user }
    }

    pub fn role(&self) -> Role {
        match self {
            PlayerRef::User { .. } => Role::User,
            PlayerRef::Mediator { .. } => Role::Mediator,
            PlayerRef::Advertiser { .. } => Role::Advertiser,
        }
    }

    fn check(&self, instance: &Instance) -> Result<(), EconError> {
        let ok = match *self {
            PlayerRef::User { mediator, user } => instance
                .mediators()
                .get(mediator as usize)
                .is_some_and(|m| (user as usize) < m.user_costs.len()),
            PlayerRef::Mediator { index } => (index as usize) < instance.mediators().len(),
            PlayerRef::Advertiser { index } => (index as usize) < instance.advertisers().len(),
        };
        if ok {
            Ok(())
        } else {
            Err(EconError::UnknownPlayer(*self))
        }
    }
}

impl fmt::Display for PlayerRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlayerRef::User { mediator, user } => write!(f, "user m{mediator}.p{user}"),
            PlayerRef::Mediator { index } => write!(f, "mediator m{index}"),
            PlayerRef::Advertiser { index } => write!(f, "advertiser a{index}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Mediator,
    Advertiser,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::User, Role::Mediator, Role::Advertiser];
}

/// Utility of a player, with `Infeasible` below every amount: a mediator that
/// won trades it cannot staff with real users.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Utility {
    Infeasible,
    Finite(Money),
}

impl fmt::Display for Utility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Utility::Infeasible => f.write_str("infeasible"),
            Utility::Finite(m) => write!(f, "{m}"),
        }
    }
}

/// True cost of serving the mediator's assigned report entries.
///
/// An entry backed by a real user is served by that user. Fabricated entries
/// are served by the cheapest real users that back no assigned entry; `None`
/// if there are not enough of them.
fn delivery_cost(instance: &Instance, reports: &ReportProfile, mediator: u32, assigned: &[u32]) -> Option<Money> {
    let truth = &instance.mediators()[mediator as usize].user_costs;
    let entries = &reports.mediators[mediator as usize].users;
    let mut busy = BTreeSet::new();
    let mut cost = Money::ZERO;
    let mut fabricated = 0usize;
    for &e in assigned {
        match entries[e as usize].backing {
            Backing::Real(i) => {
                busy.insert(i);
                cost += truth[i as usize];
            }
            Backing::Fabricated => fabricated += 1,
        }
    }
    if fabricated == 0 {
        return Some(cost);
    }
    let mut spare: Vec<Money> =
        truth.iter().enumerate().filter(|(i, _)| !busy.contains(&(*i as u32))).map(|(_, &c)| c).collect();
    if spare.len() < fabricated {
        return None;
    }
    spare.sort_unstable();
    Some(cost + spare[..fabricated].iter().copied().sum::<Money>())
}

/// Report entry standing for true user `user` of `mediator`.
fn entry_of(reports: &ReportProfile, mediator: u32, user: u32) -> Option<u32> {
    reports.mediators[mediator as usize]
        .users
        .iter()
        .position(|e| e.backing == Backing::Real(user))
        .map(|p| p as u32)
}

/// Running totals replayed from the snapshots.
struct Replay<'a> {
    outcome: &'a MechanismOutcome,
    assigned: BTreeMap<u32, Vec<u32>>,
    slots_won: BTreeMap<u32, u32>,
    charges: BTreeMap<u32, Money>,
    receipts: BTreeMap<u32, Money>,
    targets: BTreeMap<UserRef, Money>,
}

impl<'a> Replay<'a> {
    fn new(outcome: &'a MechanismOutcome) -> Self {
        Replay {
            outcome,
            assigned: BTreeMap::new(),
            slots_won: BTreeMap::new(),
            charges: BTreeMap::new(),
            receipts: BTreeMap::new(),
            targets: BTreeMap::new(),
        }
    }

    fn advance(&mut self, index: usize) {
        let snapshot = &self.outcome.snapshots[index];
        for trade in &snapshot.trades {
            self.assigned.entry(trade.user.mediator).or_default().push(trade.user.user);
            *self.slots_won.entry(trade.slot.advertiser).or_default() += 1;
            *self.charges.entry(trade.slot.advertiser).or_default() += trade.charge.amount;
            *self.receipts.entry(trade.user.mediator).or_default() += trade.payment.amount;
        }
        self.targets = snapshot.user_targets.iter().map(|e| (e.user, e.cumulative)).collect();
    }

    fn utility(&self, instance: &Instance, reports: &ReportProfile, player: PlayerRef) -> Utility {
        match player {
            PlayerRef::User { mediator, user } => {
                let Some(entry) = entry_of(reports, mediator, user) else {
                    return Utility::Finite(Money::ZERO);
                };
                let assigned = self.assigned.get(&mediator).is_some_and(|v| v.contains(&entry));
                if !assigned {
                    return Utility::Finite(Money::ZERO);
                }
                let paid = self.targets.get(&UserRef { mediator, user: entry }).copied().unwrap_or(Money::ZERO);
                Utility::Finite(paid - instance.mediators()[mediator as usize].user_costs[user as usize])
            }
            PlayerRef::Mediator { index } => {
                let assigned = self.assigned.get(&index).map(Vec::as_slice).unwrap_or(&[]);
                match delivery_cost(instance, reports, index, assigned) {
                    Some(cost) => Utility::Finite(self.receipts.get(&index).copied().unwrap_or(Money::ZERO) - cost),
                    None => Utility::Infeasible,
                }
            }
            PlayerRef::Advertiser { index } => {
                let truth = instance.advertisers()[index as usize];
                let won = self.slots_won.get(&index).copied().unwrap_or(0).min(truth.capacity);
                let charged = self.charges.get(&index).copied().unwrap_or(Money::ZERO);
                Utility::Finite(truth.value * i64::from(won) - charged)
            }
        }
    }
}

/// Cumulative utility before the first post-observation arrival and after each one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtilityTrajectory {
    pub player: PlayerRef,
    pub series: Vec<Utility>,
}

impl UtilityTrajectory {
    pub fn last(&self) -> Utility {
        *self.series.last().expect("trajectories start with an initial entry")
    }
}

/// Utilities are measured against the true parameters in `instance`;
/// `reports` is the profile the outcome was produced from.
pub fn utility_trajectory(
    instance: &Instance,
    reports: &ReportProfile,
    outcome: &MechanismOutcome,
    player: PlayerRef,
) -> Result<UtilityTrajectory, EconError> {
    player.check(instance)?;
    let mut replay = Replay::new(outcome);
    let mut series = Vec::with_capacity(outcome.snapshots.len() + 1);
    series.push(replay.utility(instance, reports, player));
    for i in 0..outcome.snapshots.len() {
        replay.advance(i);
        series.push(replay.utility(instance, reports, player));
    }
    Ok(UtilityTrajectory { player, series })
}

pub fn final_utility(
    instance: &Instance,
    reports: &ReportProfile,
    outcome: &MechanismOutcome,
    player: PlayerRef,
) -> Result<Utility, EconError> {
    player.check(instance)?;
    let mut state = Replay::new(outcome);
    for &(user, slot) in outcome.assignment.pairs() {
        state.assigned.entry(user.mediator).or_default().push(user.user);
        *state.slots_won.entry(slot.advertiser).or_default() += 1;
    }
    state.charges = outcome.charges.iter().enumerate().map(|(a, &c)| (a as u32, c)).collect();
    state.receipts = outcome.receipts.iter().enumerate().map(|(m, &r)| (m as u32, r)).collect();
    state.targets = outcome.user_targets.iter().map(|e| (e.user, e.cumulative)).collect();
    Ok(state.utility(instance, reports, player))
}

/// Every player of the market.
pub fn all_players(instance: &Instance) -> Vec<PlayerRef> {
    let mut out = Vec::new();
    for (m, spec) in instance.mediators().iter().enumerate() {
        out.extend((0..spec.user_costs.len() as u32).map(|user| PlayerRef::User { mediator: m as u32, user }));
    }
    out.extend((0..instance.mediators().len() as u32).map(|index| PlayerRef::Mediator { index }));
    out.extend((0..instance.advertisers().len() as u32).map(|index| PlayerRef::Advertiser { index }));
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum IrVerdict {
    Pass,
    Fail { index: usize },
}

impl IrVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, IrVerdict::Pass)
    }
}

/// Passes iff the series starts at zero and never decreases.
pub fn check_continuous_ir(series: &[Utility]) -> IrVerdict {
    if let Some(first) = series.first() {
        if *first != Utility::Finite(Money::ZERO) {
            return IrVerdict::Fail { index: 0 };
        }
    }
    match series.windows(2).position(|w| w[1] < w[0]) {
        Some(i) => IrVerdict::Fail { index: i + 1 },
        None => IrVerdict::Pass,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairViolation {
    pub arrival: usize,
    pub user: UserRef,
    pub charge: Money,
    pub payment: Money,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolvencyViolation {
    pub arrival: usize,
    pub mediator: u32,
    pub targets: Money,
    pub receipts: Money,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub total_charges: Money,
    pub total_receipts: Money,
    /// Trades paying at least what they charge, or whose price keys are not
    /// strictly ordered.
    pub pair_violations: Vec<PairViolation>,
    pub solvency_violations: Vec<SolvencyViolation>,
    /// Distinct `charge - payment` margins over all trades.
    pub margins: BTreeSet<Money>,
}

impl BudgetReport {
    pub fn passed(&self) -> bool {
        self.total_charges >= self.total_receipts
            && self.pair_violations.is_empty()
            && self.solvency_violations.is_empty()
            && self.margins.len() <= 1
    }
}

/// Audits the three budget conditions: total charges cover total payments,
/// each trade charges at least what it pays, and at every step each
/// mediator's forwarded targets stay within what it has received.
pub fn check_budget_balance(outcome: &MechanismOutcome) -> BudgetReport {
    let mut report = BudgetReport {
        total_charges: outcome.total_charges(),
        total_receipts: outcome.total_receipts(),
        pair_violations: Vec::new(),
        solvency_violations: Vec::new(),
        margins: BTreeSet::new(),
    };
    let mut receipts: BTreeMap<u32, Money> = BTreeMap::new();
    let mut targets: BTreeMap<UserRef, Money> = BTreeMap::new();
    let owed = |targets: &BTreeMap<UserRef, Money>, m: u32| -> Money {
        targets.iter().filter(|(u, _)| u.mediator == m).map(|(_, &t)| t).sum()
    };
    for (arrival, snapshot) in outcome.snapshots.iter().enumerate() {
        for trade in &snapshot.trades {
            let m = trade.user.mediator;
            report.margins.insert(trade.charge.amount - trade.payment.amount);
            if trade.charge.amount < trade.payment.amount || trade.payment.key >= trade.charge.key {
                report.pair_violations.push(PairViolation {
                    arrival,
                    user: trade.user,
                    charge: trade.charge.amount,
                    payment: trade.payment.amount,
                });
            }
            *receipts.entry(m).or_default() += trade.payment.amount;
            for update in &trade.target_updates {
                targets.insert(update.user, update.cumulative);
            }
            let (t, r) = (owed(&targets, m), receipts.get(&m).copied().unwrap_or_default());
            if t > r {
                report.solvency_violations.push(SolvencyViolation { arrival, mediator: m, targets: t, receipts: r });
            }
        }
        targets = snapshot.user_targets.iter().map(|e| (e.user, e.cumulative)).collect();
        let mediators: BTreeSet<u32> = targets.keys().map(|u| u.mediator).chain(receipts.keys().copied()).collect();
        for m in mediators {
            let (t, r) = (owed(&targets, m), receipts.get(&m).copied().unwrap_or_default());
            if t > r {
                report.solvency_violations.push(SolvencyViolation { arrival, mediator: m, targets: t, receipts: r });
            }
        }
    }
    report
}

/// Recomputes, after every arrival, how many assignable users and slots of
/// arrived entities are still open, and fails if both kinds remain.
///
/// Returns the index of the first offending arrival.
pub fn check_surplus_invariant(
    instance: &Instance,
    reports: &ReportProfile,
    outcome: &MechanismOutcome,
) -> Result<(), usize> {
    let tie = instance.tie_order();
    let thresholds = outcome.thresholds;
    let mut open_users: BTreeSet<UserRef> = BTreeSet::new();
    let mut open_slots: BTreeSet<crate::market::SlotRef> = BTreeSet::new();
    for (i, snapshot) in outcome.snapshots.iter().enumerate() {
        match snapshot.entity.kind {
            EntityKind::Mediator => open_users.extend(
                reports
                    .keyed_users_of(tie, snapshot.entity.index)
                    .into_iter()
                    .filter(|u| thresholds.user_assignable(&u.key))
                    .map(|u| u.user),
            ),
            EntityKind::Advertiser => open_slots.extend(
                reports
                    .keyed_slots_of(tie, snapshot.entity.index)
                    .into_iter()
                    .filter(|s| thresholds.slot_assignable(&s.key))
                    .map(|s| s.slot),
            ),
        }
        for trade in &snapshot.trades {
            open_users.remove(&trade.user);
            open_slots.remove(&trade.slot);
        }
        if !open_users.is_empty() && !open_slots.is_empty() {
            return Err(i);
        }
    }
    Ok(())
}

/// Every trade made during an arrival involves the arriving entity on exactly
/// one side, its partner arrived earlier after the observation phase, and
/// nothing is matched twice. Returns the first offending arrival.
pub fn check_online_legality(outcome: &MechanismOutcome) -> Result<(), usize> {
    let mut arrived: BTreeSet<EntityId> = BTreeSet::new();
    let mut users = BTreeSet::new();
    let mut slots = BTreeSet::new();
    for (i, snapshot) in outcome.snapshots.iter().enumerate() {
        let e = snapshot.entity;
        for trade in &snapshot.trades {
            let m = EntityId::mediator(trade.user.mediator);
            let a = EntityId::advertiser(trade.slot.advertiser);
            let partner = match e.kind {
                EntityKind::Mediator if m == e => a,
                EntityKind::Advertiser if a == e => m,
                _ => return Err(i),
            };
            if !arrived.contains(&partner) || !users.insert(trade.user) || !slots.insert(trade.slot) {
                return Err(i);
            }
        }
        if !arrived.insert(e) {
            return Err(i);
        }
    }
    Ok(())
}

/// Each user's cumulative target never decreases, within and across arrivals.
/// Returns the first offending arrival.
pub fn check_target_monotonicity(outcome: &MechanismOutcome) -> Result<(), usize> {
    let mut seen: BTreeMap<UserRef, Money> = BTreeMap::new();
    for (i, snapshot) in outcome.snapshots.iter().enumerate() {
        let updates = snapshot.trades.iter().flat_map(|t| t.target_updates.iter()).chain(&snapshot.target_updates);
        for update in updates {
            let prior = seen.get(&update.user).copied().unwrap_or(Money::ZERO);
            if update.previous != prior || update.cumulative < prior {
                return Err(i);
            }
            seen.insert(update.user, update.cumulative);
        }
        for entry in &snapshot.user_targets {
            if seen.get(&entry.user).copied().unwrap_or(Money::ZERO) != entry.cumulative {
                return Err(i);
            }
        }
    }
    Ok(())
}

/// Results of every outcome-level audit on one run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeAudit {
    pub budget: BudgetReport,
    pub ir_failures: Vec<(PlayerRef, usize)>,
    pub surplus: Result<(), usize>,
    pub legality: Result<(), usize>,
    pub monotonicity: Result<(), usize>,
}

impl OutcomeAudit {
    pub fn budget_ok(&self) -> bool {
        self.budget.passed()
    }

    pub fn ir_ok(&self) -> bool {
        self.ir_failures.is_empty()
    }

    pub fn invariants_ok(&self) -> bool {
        self.surplus.is_ok() && self.legality.is_ok() && self.monotonicity.is_ok()
    }

    pub fn passed(&self) -> bool {
        self.budget_ok() && self.ir_ok() && self.invariants_ok()
    }
}

/// First drop in each player's utility over the run, found in one pass by
/// re-evaluating only the players touched by each arrival.
pub fn continuous_ir_failures(
    instance: &Instance,
    reports: &ReportProfile,
    outcome: &MechanismOutcome,
) -> Vec<(PlayerRef, usize)> {
    let zero = Utility::Finite(Money::ZERO);
    let mut replay = Replay::new(outcome);
    let mut last: BTreeMap<PlayerRef, Utility> = BTreeMap::new();
    let mut failures = Vec::new();
    let mut failed = BTreeSet::new();
    let user_player = |entry: UserRef| match reports.mediators[entry.mediator as usize].users[entry.user as usize].backing {
        Backing::Real(i) => Some(PlayerRef::User { mediator: entry.mediator, user: i }),
        Backing::Fabricated => None,
    };
    for (i, snapshot) in outcome.snapshots.iter().enumerate() {
        replay.advance(i);
        let mut touched = BTreeSet::new();
        for trade in &snapshot.trades {
            touched.insert(PlayerRef::Mediator { index: trade.user.mediator });
            touched.insert(PlayerRef::Advertiser { index: trade.slot.advertiser });
            touched.extend(user_player(trade.user));
            touched.extend(trade.target_updates.iter().filter_map(|u| user_player(u.user)));
        }
        touched.extend(snapshot.target_updates.iter().filter_map(|u| user_player(u.user)));
        for p in touched {
            let now = replay.utility(instance, reports, p);
            let before = last.get(&p).copied().unwrap_or(zero);
            if now < before && failed.insert(p) {
                failures.push((p, i + 1));
            }
            last.insert(p, now);
        }
    }
    failures
}

/// Runs every audit on an all-truthful outcome.
pub fn audit_truthful(instance: &Instance, outcome: &MechanismOutcome) -> OutcomeAudit {
    let reports = ReportProfile::truthful(instance);
    OutcomeAudit {
        budget: check_budget_balance(outcome),
        ir_failures: continuous_ir_failures(instance, &reports, outcome),
        surplus: check_surplus_invariant(instance, &reports, outcome),
        legality: check_online_legality(outcome),
        monotonicity: check_target_monotonicity(outcome),
    }
}

/// Distinct threshold amounts seen across outcomes, used to aim misreports
/// at the price boundaries.
pub fn threshold_hints<'a>(outcomes: impl IntoIterator<Item = &'a MechanismOutcome>) -> Vec<Money> {
    let mut hints = BTreeSet::new();
    for o in outcomes {
        if let Thresholds::Priced { p_hat, b_hat } = o.thresholds {
            hints.insert(p_hat.amount);
            hints.insert(b_hat.amount);
        }
    }
    hints.into_iter().collect()
}
