//! Randomised verification sweeps over generated markets.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    all_players, audit_truthful, check_online_legality, check_surplus_invariant, generate_misreports,
    EconError, PairedRunner, PlayerRef, Role,
};
use crate::analysis::seed_for;
use crate::engine::{EngineVariant, MechanismOutcome};
use crate::io::generator::{generate_instance, CountDist, GeneratorConfig, GeneratorError, MoneyDist};
use crate::market::Instance;
use crate::money::Money;
use crate::rational::{ratio_to_f64, serde_ratio, Ratio};

/// Most violations kept verbatim in a report.
const EXAMPLE_CAP: usize = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SweepError {
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Econ(#[from] EconError),
    #[error("sweep needs at least one instance and one seed")]
    Empty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub instances: usize,
    pub seeds: usize,
    /// Misreports per player role and instance.
    pub misreports: usize,
    #[serde(with = "serde_ratio")]
    pub alpha: Ratio,
    pub base_seed: u64,
    pub variant: EngineVariant,
    pub truthful_audits: bool,
    pub incentives: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            instances: 200,
            seeds: 20,
            misreports: 20,
            alpha: Ratio::new(1.into(), 100.into()),
            base_seed: 0,
            variant: EngineVariant::Faithful,
            truthful_audits: true,
            incentives: true,
        }
    }
}

/// Markets of mediators with one or two users and advertisers with one or two
/// slots. Even indices draw whole-unit amounts so that ties are common.
pub fn verification_family(alpha: &Ratio, seed: u64, index: usize) -> GeneratorConfig {
    let grid = if index.is_multiple_of(2) { Money::from_units(1) } else { Money::from_micros(10_000) };
    let span = MoneyDist::Uniform { low: Money::ZERO, high: Money::from_units(20) };
    let tau = (2.4 / ratio_to_f64(alpha)).ceil() as usize;
    GeneratorConfig {
        mediators: 1,
        advertisers: 1,
        users_per_mediator: CountDist::Uniform { low: 1, high: 2 },
        capacity: CountDist::Uniform { low: 1, high: 2 },
        cost: span,
        value: span,
        grid,
        target_alpha: alpha.clone(),
        seed,
        max_retries: 64,
        scale_to_fit: true,
    }
    .sized_for_tau(tau)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    BudgetBalance,
    ContinuousIr,
    SurplusInvariant,
    OnlineLegality,
    TargetMonotonicity,
    IncentiveCompatibility,
}

impl Check {
    pub const ALL: [Check; 6] = [
        Check::BudgetBalance,
        Check::ContinuousIr,
        Check::SurplusInvariant,
        Check::OnlineLegality,
        Check::TargetMonotonicity,
        Check::IncentiveCompatibility,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub check: Check,
    pub instance: usize,
    pub seed: u64,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleTally {
    pub cases: usize,
    pub paired_runs: usize,
    /// Paired runs where the misreport changed the player's utility.
    pub changed: usize,
    pub profitable: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: SweepConfig,
    pub truthful_runs: usize,
    pub deviant_runs: usize,
    pub priced_runs: usize,
    pub trades: usize,
    pub violations: BTreeMap<Check, usize>,
    pub roles: BTreeMap<Role, RoleTally>,
    pub examples: Vec<Violation>,
}

impl SweepReport {
    fn empty(config: SweepConfig) -> Self {
        SweepReport {
            config,
            truthful_runs: 0,
            deviant_runs: 0,
            priced_runs: 0,
            trades: 0,
            violations: Check::ALL.iter().map(|&c| (c, 0)).collect(),
            roles: Role::ALL.iter().map(|&r| (r, RoleTally::default())).collect(),
            examples: Vec::new(),
        }
    }

    fn flag(&mut self, check: Check, instance: usize, seed: u64, detail: String) {
        *self.violations.entry(check).or_default() += 1;
        if self.examples.len() < EXAMPLE_CAP {
            self.examples.push(Violation { check, instance, seed, detail });
        }
    }

    fn merge(mut self, other: SweepReport) -> SweepReport {
        self.truthful_runs += other.truthful_runs;
        self.deviant_runs += other.deviant_runs;
        self.priced_runs += other.priced_runs;
        self.trades += other.trades;
        for (c, n) in other.violations {
            *self.violations.entry(c).or_default() += n;
        }
        for (r, t) in other.roles {
            let mine = self.roles.entry(r).or_default();
            mine.cases += t.cases;
            mine.paired_runs += t.paired_runs;
            mine.changed += t.changed;
            mine.profitable += t.profitable;
        }
        let room = EXAMPLE_CAP.saturating_sub(self.examples.len());
        self.examples.extend(other.examples.into_iter().take(room));
        self
    }

    pub fn count(&self, check: Check) -> usize {
        self.violations.get(&check).copied().unwrap_or(0)
    }

    pub fn passed(&self) -> bool {
        self.violations.values().all(|&n| n == 0)
    }
}

/// Players that trade in at least one of the outcomes.
fn traders(outcomes: &[MechanismOutcome]) -> Vec<PlayerRef> {
    let mut out = std::collections::BTreeSet::new();
    for trade in outcomes.iter().flat_map(MechanismOutcome::trades) {
        out.insert(PlayerRef::user(trade.user));
        out.insert(PlayerRef::Mediator { index: trade.user.mediator });
        out.insert(PlayerRef::Advertiser { index: trade.slot.advertiser });
    }
    out.into_iter().collect()
}

/// One deviating player per role, usually one that trades under truth.
fn pick_player<R: Rng + ?Sized>(role: Role, everyone: &[PlayerRef], traders: &[PlayerRef], rng: &mut R) -> PlayerRef {
    let active: Vec<PlayerRef> = traders.iter().copied().filter(|p| p.role() == role).collect();
    if !active.is_empty() && rng.random_bool(0.75) {
        return *active.choose(rng).expect("non-empty");
    }
    let all: Vec<PlayerRef> = everyone.iter().copied().filter(|p| p.role() == role).collect();
    *all.choose(rng).expect("every role has players")
}

fn audit_outcomes(report: &mut SweepReport, index: usize, instance: &Instance, seeds: &[u64], outcomes: &[MechanismOutcome]) {
    for (&seed, outcome) in seeds.iter().zip(outcomes) {
        let audit = audit_truthful(instance, outcome);
        if !audit.budget_ok() {
            let detail = match (audit.budget.pair_violations.first(), audit.budget.solvency_violations.first()) {
                (Some(p), _) => format!("arrival {}: charge {} against payment {}", p.arrival, p.charge, p.payment),
                (None, Some(s)) => {
                    format!("arrival {}: mediator m{} owes {} on receipts {}", s.arrival, s.mediator, s.targets, s.receipts)
                }
                (None, None) => format!(
                    "charges {} below receipts {}",
                    audit.budget.total_charges, audit.budget.total_receipts
                ),
            };
            report.flag(Check::BudgetBalance, index, seed, detail);
        }
        if let Some((player, step)) = audit.ir_failures.first() {
            let detail = format!("{player} loses utility at arrival {step} ({} players affected)", audit.ir_failures.len());
            report.flag(Check::ContinuousIr, index, seed, detail);
        }
        if let Err(i) = audit.surplus {
            report.flag(Check::SurplusInvariant, index, seed, format!("open users and slots after arrival {i}"));
        }
        if let Err(i) = audit.legality {
            report.flag(Check::OnlineLegality, index, seed, format!("illegal trade at arrival {i}"));
        }
        if let Err(i) = audit.monotonicity {
            report.flag(Check::TargetMonotonicity, index, seed, format!("target stream breaks at arrival {i}"));
        }
    }
}

fn sweep_instance(config: &SweepConfig, index: usize) -> Result<SweepReport, SweepError> {
    let mut report = SweepReport::empty(config.clone());
    let instance = generate_instance(&verification_family(&config.alpha, seed_for(config.base_seed, 0, index), index))?;
    let seeds: Vec<u64> = (0..config.seeds).map(|j| seed_for(config.base_seed, index + 1, j)).collect();
    let runner = PairedRunner::new(&instance, &config.alpha, &seeds, config.variant)?;
    report.truthful_runs += runner.outcomes().len();
    report.priced_runs += runner.outcomes().iter().filter(|o| !o.thresholds.is_dummy()).count();
    report.trades += runner.outcomes().iter().map(|o| o.assignment.len()).sum::<usize>();
    if config.truthful_audits {
        audit_outcomes(&mut report, index, &instance, &seeds, runner.outcomes());
    }
    if !config.incentives {
        return Ok(report);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(config.base_seed ^ 0x1C, index, 0));
    let everyone = all_players(&instance);
    let active = traders(runner.outcomes());
    let hints = runner.hints();
    for role in Role::ALL {
        let player = pick_player(role, &everyone, &active, &mut rng);
        let cases = generate_misreports(player, &instance, &mut rng, config.misreports, &hints)?;
        for case in cases {
            let runs = runner.run_case(&case)?;
            let tally = report.roles.entry(role).or_default();
            tally.cases += 1;
            tally.paired_runs += runs.verdicts.len();
            tally.changed += runs.verdicts.iter().filter(|v| v.truthful != v.deviant).count();
            let mut flags = Vec::new();
            for (verdict, outcome) in runs.verdicts.iter().zip(&runs.outcomes) {
                if !verdict.passed() {
                    tally.profitable += 1;
                    flags.push((
                        Check::IncentiveCompatibility,
                        verdict.seed,
                        format!(
                            "{} gains with {:?}: {} over truthful {}",
                            case.player, case.misreport, verdict.deviant, verdict.truthful
                        ),
                    ));
                }
                if let Err(i) = check_surplus_invariant(&instance, &runs.reports, outcome) {
                    flags.push((Check::SurplusInvariant, verdict.seed, format!("deviant run, arrival {i}")));
                }
                if let Err(i) = check_online_legality(outcome) {
                    flags.push((Check::OnlineLegality, verdict.seed, format!("deviant run, arrival {i}")));
                }
            }
            report.deviant_runs += runs.outcomes.len();
            for (check, seed, detail) in flags {
                report.flag(check, index, seed, detail);
            }
        }
    }
    Ok(report)
}

/// Generates `instances` markets and audits every run on them; see
/// [`SweepConfig`] for what is checked.
pub fn run_sweep(config: &SweepConfig) -> Result<SweepReport, SweepError> {
    if config.instances == 0 || config.seeds == 0 {
        return Err(SweepError::Empty);
    }
    let parts: Vec<SweepReport> =
        (0..config.instances).into_par_iter().map(|i| sweep_instance(config, i)).collect::<Result<_, _>>()?;
    Ok(parts.into_iter().fold(SweepReport::empty(config.clone()), SweepReport::merge))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canonical::tau;
    use crate::market::validate_instance;

    fn small(variant: EngineVariant) -> SweepConfig {
        SweepConfig { instances: 4, seeds: 3, misreports: 4, variant, ..SweepConfig::default() }
    }

    #[test]
    fn family_meets_its_promise() {
        let alpha = Ratio::new(1.into(), 100.into());
        for index in 0..2 {
            let inst = generate_instance(&verification_family(&alpha, 9, index)).unwrap();
            assert!(tau(&inst) >= 200);
            assert!(validate_instance(&inst, &alpha).unwrap().passed());
        }
    }

    #[test]
    fn healthy_engine_passes_small_sweep() {
        let report = run_sweep(&small(EngineVariant::Faithful)).unwrap();
        assert!(report.passed(), "{:?}", report.examples);
        assert_eq!(report.truthful_runs, 12);
        assert!(report.priced_runs > 0 && report.trades > 0);
        assert!(report.roles.values().all(|t| t.cases > 0));
    }

    #[test]
    fn broken_payment_fails_budget() {
        let mut config = small(EngineVariant::PaySlotPrice);
        config.incentives = false;
        let report = run_sweep(&config).unwrap();
        assert!(report.count(Check::BudgetBalance) > 0);
    }

    #[test]
    fn merge_is_additive() {
        let config = small(EngineVariant::Faithful);
        let mut a = SweepReport::empty(config.clone());
        a.flag(Check::ContinuousIr, 0, 1, "x".into());
        let mut b = SweepReport::empty(config);
        b.flag(Check::ContinuousIr, 1, 2, "y".into());
        b.trades = 3;
        let m = a.merge(b);
        assert_eq!(m.count(Check::ContinuousIr), 2);
        assert_eq!(m.trades, 3);
        assert_eq!(m.examples.len(), 2);
        assert!(!m.passed());
    }

    #[test]
    fn empty_sweep_rejected() {
        let config = SweepConfig { instances: 0, ..SweepConfig::default() };
        assert_eq!(run_sweep(&config).unwrap_err(), SweepError::Empty);
    }
}
