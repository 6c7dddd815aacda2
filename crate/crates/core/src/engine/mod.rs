//! The online mechanism: observation phase, posted thresholds, arrival-driven
//! matching, and the per-user payment recommendation stream.

mod state;
mod thresholds;

use num::{One, Signed};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use state::{ArrivalSnapshot, MechanismState, Price, TargetEntry, TargetUpdate, Trade};
pub use thresholds::{compute_thresholds, Thresholds, PRICE_LOCATION_FACTOR};

use crate::market::{Assignment, EntityId, Instance, MarketError, ReportProfile};
use crate::money::Money;
use crate::rational::{derive_r, format_ratio, one_half, ratio_to_f64, serde_ratio, Ratio};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("alpha must lie in (0, 1], got {0}")]
    InvalidAlpha(String),
    #[error("r must lie in (0, 1/2], got {0}")]
    InvalidR(String),
    #[error(transparent)]
    Reports(#[from] MarketError),
    #[error("forced arrival order is not a permutation of the entities: {0}")]
    ForcedOrder(String),
    #[error("forced observation count {count} exceeds the {entities} entities")]
    ForcedObservationCount { count: usize, entities: usize },
    #[error("{0} has already arrived")]
    EntityAlreadyProcessed(EntityId),
    #[error("{0} is not an entity of this market")]
    UnknownEntity(EntityId),
    #[error("trading is not allowed while the observation phase is open")]
    ObservationOpen,
    #[error("the observation phase is already closed")]
    ObservationClosed,
    #[error("invalid threshold override: {0}")]
    InvalidOverride(String),
}

/// Deliberately broken engines used as negative controls for the auditors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineVariant {
    #[default]
    Faithful,
    /// Pays mediators the slot price instead of the user price.
    PaySlotPrice,
    /// Never updates the per-user payment targets.
    SkipPaymentUpdates,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MechanismConfig {
    #[serde(with = "serde_ratio")]
    pub alpha: Ratio,
    #[serde(with = "serde_ratio")]
    pub r: Ratio,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_override: Option<Thresholds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forced_arrival_order: Option<Vec<EntityId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forced_observation_count: Option<usize>,
    #[serde(default, skip_serializing_if = "is_faithful")]
    pub variant: EngineVariant,
}

fn is_faithful(v: &EngineVariant) -> bool {
    *v == EngineVariant::Faithful
}

impl MechanismConfig {
    /// Configuration with `r` derived from `alpha`.
    pub fn new(alpha: Ratio, seed: u64) -> Result<Self, EngineError> {
        let r = derive_r(&alpha).ok_or_else(|| EngineError::InvalidAlpha(format_ratio(&alpha)))?;
        Ok(MechanismConfig {
            alpha,
            r,
            seed,
            threshold_override: None,
            forced_arrival_order: None,
            forced_observation_count: None,
            variant: EngineVariant::Faithful,
        })
    }

    pub fn with_r(mut self, r: Ratio) -> Self {
        self.r = r;
        self
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if !self.alpha.is_positive() || self.alpha > Ratio::one() {
            return Err(EngineError::InvalidAlpha(format_ratio(&self.alpha)));
        }
        if !self.r.is_positive() || self.r > one_half() {
            return Err(EngineError::InvalidR(format_ratio(&self.r)));
        }
        if let Some(Thresholds::Priced { p_hat, b_hat }) = self.threshold_override {
            Thresholds::priced(p_hat, b_hat)?;
        }
        Ok(())
    }

    pub fn uses_test_overrides(&self) -> bool {
        self.threshold_override.is_some()
            || self.forced_arrival_order.is_some()
            || self.forced_observation_count.is_some()
            || self.variant != EngineVariant::Faithful
    }
}

/// Everything a run produced.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MechanismOutcome {
    pub thresholds: Thresholds,
    /// The full arrival order; the first `observation_count` entries are `T`.
    pub arrival_order: Vec<EntityId>,
    pub observation_count: usize,
    pub observed_mediators: Vec<u32>,
    pub observed_advertisers: Vec<u32>,
    pub assignment: Assignment,
    /// Per advertiser.
    pub charges: Vec<Money>,
    /// Per mediator.
    pub receipts: Vec<Money>,
    /// Final cumulative target of every assigned user.
    pub user_targets: Vec<TargetEntry>,
    /// One entry per post-observation arrival.
    pub snapshots: Vec<ArrivalSnapshot>,
    pub test_overrides_used: bool,
    #[serde(default)]
    pub variant: EngineVariant,
}

impl MechanismOutcome {
    pub fn trades(&self) -> impl Iterator<Item = &Trade> {
        self.snapshots.iter().flat_map(|s| s.trades.iter())
    }

    pub fn total_charges(&self) -> Money {
        self.charges.iter().copied().sum()
    }

    pub fn total_receipts(&self) -> Money {
        self.receipts.iter().copied().sum()
    }

    pub fn target_of(&self, user: crate::market::UserRef) -> Option<Money> {
        self.user_targets.iter().find(|e| e.user == user).map(|e| e.cumulative)
    }
}

/// `t` as the number of successes in `n` independent Bernoulli(`r`) draws.
pub fn sample_observation_count<R: Rng + ?Sized>(n: usize, r: f64, rng: &mut R) -> usize {
    let p = r.clamp(0.0, 1.0);
    (0..n).filter(|_| rng.random_bool(p)).count()
}

fn check_permutation(order: &[EntityId], instance: &Instance) -> Result<(), EngineError> {
    crate::market::TieOrder::new(order.to_vec(), instance.mediators().len(), instance.advertisers().len())
        .map(|_| ())
        .map_err(|e| EngineError::ForcedOrder(e.to_string()))
}

/// Runs the mechanism on `reports`. The instance supplies the entity set and
/// the tie order; its true costs and values are never read.
///
/// The instance is expected to satisfy the size promise for `config.alpha`;
/// this is not enforced here so that the engine can be exercised on small
/// hand-written markets.
pub fn run_mechanism(
    instance: &Instance,
    reports: &ReportProfile,
    config: &MechanismConfig,
) -> Result<MechanismOutcome, EngineError> {
    config.validate()?;
    reports.check_against(instance)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let arrival_order = match &config.forced_arrival_order {
        Some(order) => {
            check_permutation(order, instance)?;
            order.clone()
        }
        None => {
            let mut order = instance.entities();
            order.shuffle(&mut rng);
            order
        }
    };
    let n = arrival_order.len();
    let observation_count = match config.forced_observation_count {
        Some(count) if count > n => return Err(EngineError::ForcedObservationCount { count, entities: n }),
        Some(count) => count,
        None => sample_observation_count(n, ratio_to_f64(&config.r), &mut rng),
    };

    let mut state = MechanismState::new(reports, instance.tie_order(), config.variant);
    for &entity in &arrival_order[..observation_count] {
        state.observe(entity)?;
    }
    let thresholds = match config.threshold_override {
        Some(t) => {
            state.close_with(t)?;
            t
        }
        None => state.close_observation(&config.r, &config.alpha)?,
    };
    for &entity in &arrival_order[observation_count..] {
        state.process_arrival(entity)?;
    }
    let parts = state.into_parts();
    Ok(MechanismOutcome {
        thresholds,
        arrival_order,
        observation_count,
        observed_mediators: parts.observed_mediators,
        observed_advertisers: parts.observed_advertisers,
        assignment: parts.assignment,
        charges: parts.charges,
        receipts: parts.receipts,
        user_targets: parts.user_targets,
        snapshots: parts.snapshots,
        test_overrides_used: config.uses_test_overrides(),
        variant: config.variant,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::market::tests::simple_instance;
    use crate::market::{Backing, ReportedUser, TieKey, TieOrder, UserRef};
    use crate::rational::parse_ratio;

    /// One mediator {1, 3, 5} arriving before one advertiser (cap 2, value 7)
    /// with thresholds c = 4 and v = 6 injected.
    pub(crate) fn worked_example() -> (Instance, MechanismConfig) {
        let inst = simple_instance(&[&[1, 3, 5]], &[(2, 7)]);
        // Threshold keys borrowed from entities outside this pair's ranks.
        let p_hat = TieKey::new(Money::from_units(4), 0, 99);
        let b_hat = TieKey::new(Money::from_units(6), 1, 99);
        let mut config = MechanismConfig::new(parse_ratio("1").unwrap(), 7).unwrap();
        config.threshold_override = Some(Thresholds::priced(p_hat, b_hat).unwrap());
        config.forced_arrival_order = Some(vec![EntityId::mediator(0), EntityId::advertiser(0)]);
        config.forced_observation_count = Some(0);
        (inst, config)
    }

    #[test]
    fn worked_example_trace() {
        let (inst, config) = worked_example();
        let out = run_mechanism(&inst, &ReportProfile::truthful(&inst), &config).unwrap();
        assert_eq!(out.assignment.len(), 2);
        assert_eq!(out.charges, vec![Money::from_units(12)]);
        assert_eq!(out.receipts, vec![Money::from_units(8)]);
        let u0 = UserRef { mediator: 0, user: 0 };
        let u1 = UserRef { mediator: 0, user: 1 };
        assert_eq!(out.target_of(u0), Some(Money::from_units(4)));
        assert_eq!(out.target_of(u1), Some(Money::from_units(4)));
        assert!(out.test_overrides_used);

        assert!(out.snapshots[0].trades.is_empty());
        let trades = &out.snapshots[1].trades;
        assert_eq!(trades.len(), 2);
        assert_eq!(trades[0].user, u0);
        assert_eq!(trades[0].slot.slot, 0);
        assert_eq!(
            trades[0].target_updates,
            vec![TargetUpdate { user: u0, previous: Money::ZERO, cumulative: Money::from_units(3) }]
        );
        assert_eq!(trades[1].user, u1);
        assert_eq!(trades[1].target_updates.len(), 2);
        assert!(trades[1].target_updates.iter().all(|u| u.cumulative == Money::from_units(4)));
        assert_eq!(out.snapshots[1].open_slots, 0);
    }

    #[test]
    fn mediator_alone_does_nothing() {
        let (inst, mut config) = worked_example();
        config.forced_arrival_order = Some(vec![EntityId::advertiser(0), EntityId::mediator(0)]);
        config.forced_observation_count = Some(1);
        let out = run_mechanism(&inst, &ReportProfile::truthful(&inst), &config).unwrap();
        assert!(out.assignment.is_empty());
        assert_eq!(out.snapshots.len(), 1);
        assert_eq!(out.snapshots[0].open_users, 2);
    }

    #[test]
    fn dummy_thresholds_trade_nothing() {
        let (inst, mut config) = worked_example();
        config.threshold_override = Some(Thresholds::Dummy);
        let out = run_mechanism(&inst, &ReportProfile::truthful(&inst), &config).unwrap();
        assert!(out.assignment.is_empty());
        assert_eq!(out.total_charges(), Money::ZERO);
        assert!(out.snapshots.iter().all(|s| s.open_users == 0 && s.open_slots == 0));
    }

    #[test]
    fn observing_everything_trades_nothing() {
        let inst = simple_instance(&[&[1, 2], &[1]], &[(1, 9), (2, 8)]);
        let mut config = MechanismConfig::new(parse_ratio("1/1000").unwrap(), 3).unwrap();
        config.forced_observation_count = Some(4);
        let out = run_mechanism(&inst, &ReportProfile::truthful(&inst), &config).unwrap();
        assert!(out.assignment.is_empty());
        assert!(out.snapshots.is_empty());
        assert_eq!(out.receipts, vec![Money::ZERO; 2]);
    }

    #[test]
    fn rejects_bad_config() {
        let inst = simple_instance(&[&[1]], &[(1, 9)]);
        let reports = ReportProfile::truthful(&inst);
        let mut config = MechanismConfig::new(parse_ratio("1/2").unwrap(), 0).unwrap();
        config.r = parse_ratio("0.6").unwrap();
        assert!(matches!(run_mechanism(&inst, &reports, &config), Err(EngineError::InvalidR(_))));
        config.r = one_half();
        config.forced_observation_count = Some(5);
        assert!(matches!(run_mechanism(&inst, &reports, &config), Err(EngineError::ForcedObservationCount { .. })));
        config.forced_observation_count = None;
        config.forced_arrival_order = Some(vec![EntityId::mediator(0), EntityId::mediator(0)]);
        assert!(matches!(run_mechanism(&inst, &reports, &config), Err(EngineError::ForcedOrder(_))));
        assert!(MechanismConfig::new(parse_ratio("0").unwrap(), 0).is_err());
    }

    #[test]
    fn state_rejects_out_of_phase_calls() {
        let inst = simple_instance(&[&[1]], &[(1, 9)]);
        let reports = ReportProfile::truthful(&inst);
        let tie = TieOrder::natural(1, 1);
        let mut state = MechanismState::new(&reports, &tie, EngineVariant::Faithful);
        assert_eq!(state.process_arrival(EntityId::mediator(0)).unwrap_err(), EngineError::ObservationOpen);
        state.observe(EntityId::mediator(0)).unwrap();
        assert_eq!(state.observe(EntityId::mediator(0)).unwrap_err(), EngineError::EntityAlreadyProcessed(EntityId::mediator(0)));
        state.close_with(Thresholds::Dummy).unwrap();
        assert_eq!(state.observe(EntityId::advertiser(0)).unwrap_err(), EngineError::ObservationClosed);
        assert_eq!(state.process_arrival(EntityId::mediator(0)).unwrap_err(), EngineError::EntityAlreadyProcessed(EntityId::mediator(0)));
        assert_eq!(state.process_arrival(EntityId::advertiser(3)).unwrap_err(), EngineError::UnknownEntity(EntityId::advertiser(3)));
        state.process_arrival(EntityId::advertiser(0)).unwrap();
    }

    #[test]
    fn same_seed_same_outcome() {
        let inst = simple_instance(&[&[1, 2], &[3], &[0]], &[(1, 9), (2, 8), (1, 5)]);
        let reports = ReportProfile::truthful(&inst);
        let mut config = MechanismConfig::new(parse_ratio("1/1000").unwrap(), 11).unwrap();
        config.threshold_override = Some(Thresholds::priced(
            TieKey::new(Money::from_units(4), 0, 50),
            TieKey::new(Money::from_units(6), 3, 50),
        ).unwrap());
        let a = run_mechanism(&inst, &reports, &config).unwrap();
        let b = run_mechanism(&inst, &reports, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fabricated_entries_are_legal_reports() {
        let inst = simple_instance(&[&[1]], &[(1, 9)]);
        let mut reports = ReportProfile::truthful(&inst);
        reports.mediators[0].users.push(ReportedUser { cost: Money::from_units(2), backing: Backing::Fabricated });
        let (_, mut config) = worked_example();
        config.forced_arrival_order = None;
        assert!(run_mechanism(&inst, &reports, &config).is_ok());
    }

    #[test]
    fn bernoulli_count_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_observation_count(40, 0.0, &mut rng), 0);
        assert_eq!(sample_observation_count(40, 1.0, &mut rng), 40);
        assert_eq!(sample_observation_count(0, 0.5, &mut rng), 0);
    }
}
