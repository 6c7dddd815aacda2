use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{final_utility, threshold_hints, EconError, PlayerRef, Utility};
use crate::engine::{run_mechanism, EngineVariant, MechanismConfig, MechanismOutcome};
use crate::market::{AdvertiserReport, Backing, Instance, MediatorReport, ReportProfile, ReportedUser};
use crate::money::Money;
use crate::rational::Ratio;

/// Replacement report for one player.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Misreport {
    UserCost { cost: Money },
    Mediator { report: MediatorReport },
    Advertiser { report: AdvertiserReport },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviationCase {
    pub player: PlayerRef,
    pub misreport: Misreport,
}

impl DeviationCase {
    /// `base` with this player's report replaced. A deviating user keeps
    /// her mediator's report otherwise intact.
    pub fn apply(&self, base: &ReportProfile) -> Result<ReportProfile, EconError> {
        let mut out = base.clone();
        match (self.player, &self.misreport) {
            (PlayerRef::User { mediator, user }, Misreport::UserCost { cost }) => {
                let entry = out
                    .mediators
                    .get_mut(mediator as usize)
                    .and_then(|m| m.users.iter_mut().find(|e| e.backing == Backing::Real(user)))
                    .ok_or(EconError::UnknownPlayer(self.player))?;
                entry.cost = *cost;
            }
            (PlayerRef::Mediator { index }, Misreport::Mediator { report }) => {
                *out.mediators.get_mut(index as usize).ok_or(EconError::UnknownPlayer(self.player))? = report.clone();
            }
            (PlayerRef::Advertiser { index }, Misreport::Advertiser { report }) => {
                *out.advertisers.get_mut(index as usize).ok_or(EconError::UnknownPlayer(self.player))? = *report;
            }
            _ => return Err(EconError::MisreportKind(self.player)),
        }
        Ok(out)
    }
}

const HIGH: Money = Money::from_units(1_000_000);

fn push_unique<T: PartialEq>(out: &mut Vec<T>, truth: &T, candidate: T) {
    if &candidate != truth && !out.contains(&candidate) {
        out.push(candidate);
    }
}

fn user_candidates(truth: Money, hints: &[Money]) -> Vec<Money> {
    let unit = Money::from_units(1);
    let mut out = Vec::new();
    let nonneg = |m: Money| if m.is_negative() { Money::ZERO } else { m };
    for c in [Money::ZERO, truth * 2, truth + unit, nonneg(truth - unit)] {
        push_unique(&mut out, &truth, c);
    }
    for c in [truth + Money::MICRO, nonneg(truth - Money::MICRO), truth.half(), HIGH] {
        push_unique(&mut out, &truth, c);
    }
    for &h in hints {
        for c in [h, nonneg(h - Money::MICRO), h + Money::MICRO] {
            push_unique(&mut out, &truth, c);
        }
    }
    out
}

fn advertiser_candidates(truth: AdvertiserReport, hints: &[Money]) -> Vec<AdvertiserReport> {
    let (u, v) = (truth.capacity, truth.value);
    let unit = Money::from_units(1);
    let with = |capacity: u32, value: Money| AdvertiserReport {
        capacity,
        value: if value.is_negative() { Money::ZERO } else { value },
    };
    let mut out = Vec::new();
    for c in [with(u, v * 2), with(u.saturating_sub(1), v), with(u + 1, v)] {
        push_unique(&mut out, &truth, c);
    }
    for c in [with(0, v), with(u * 2, v), with(u, v.half()), with(u, Money::ZERO), with(u, v + unit), with(u, v - unit)] {
        push_unique(&mut out, &truth, c);
    }
    for &h in hints {
        for value in [h, h + Money::MICRO, h - Money::MICRO] {
            push_unique(&mut out, &truth, with(u, value));
            push_unique(&mut out, &truth, with(u + 1, value));
        }
    }
    out
}

fn mediator_candidates(truth: &MediatorReport, hints: &[Money]) -> Vec<MediatorReport> {
    let users = &truth.users;
    let fake = |cost: Money| ReportedUser { cost, backing: Backing::Fabricated };
    let mut out = Vec::new();
    let cheapest = users.iter().map(|u| u.cost).min();

    for i in 0..users.len() {
        let mut v = users.clone();
        v.remove(i);
        push_unique(&mut out, truth, MediatorReport { users: v });
    }
    if let Some(c) = cheapest {
        let mut v = users.clone();
        v.push(fake(c.half()));
        push_unique(&mut out, truth, MediatorReport { users: v });
        let mut v = users.clone();
        v.push(fake(c));
        push_unique(&mut out, truth, MediatorReport { users: v });
    }
    let mut reversed = users.clone();
    reversed.reverse();
    push_unique(&mut out, truth, MediatorReport { users: reversed });
    for cost in [Money::ZERO, HIGH] {
        let mut v = users.clone();
        v.push(fake(cost));
        push_unique(&mut out, truth, MediatorReport { users: v });
    }
    for i in 0..users.len() {
        for c in [Money::ZERO, users[i].cost * 2, users[i].cost.half(), HIGH] {
            let mut v = users.clone();
            v[i].cost = c;
            push_unique(&mut out, truth, MediatorReport { users: v });
        }
    }
    let mut all_free = users.clone();
    all_free.iter_mut().for_each(|u| u.cost = Money::ZERO);
    push_unique(&mut out, truth, MediatorReport { users: all_free });
    for &h in hints {
        let below = if h > Money::ZERO { h - Money::MICRO } else { h };
        let mut shaded = users.clone();
        shaded.iter_mut().for_each(|u| u.cost = u.cost.min(below));
        push_unique(&mut out, truth, MediatorReport { users: shaded });
        let mut v = users.clone();
        v.push(fake(below));
        push_unique(&mut out, truth, MediatorReport { users: v });
        for i in 0..users.len() {
            for c in [h, below, h + Money::MICRO] {
                let mut v = users.clone();
                v[i].cost = c;
                push_unique(&mut out, truth, MediatorReport { users: v });
            }
        }
    }
    out
}

fn random_money<R: Rng + ?Sized>(rng: &mut R, upper: Money) -> Money {
    Money::from_micros(rng.random_range(0..=upper.micros().max(1)))
}

fn random_case<R: Rng + ?Sized>(player: PlayerRef, instance: &Instance, rng: &mut R, span: Money) -> Misreport {
    match player {
        PlayerRef::User { .. } => Misreport::UserCost { cost: random_money(rng, span) },
        PlayerRef::Advertiser { index } => {
            let truth = instance.advertisers()[index as usize];
            Misreport::Advertiser {
                report: AdvertiserReport {
                    capacity: rng.random_range(0..=truth.capacity * 2 + 1),
                    value: random_money(rng, span),
                },
            }
        }
        PlayerRef::Mediator { index } => {
            let truth = &ReportProfile::truthful(instance).mediators[index as usize];
            let mut users = Vec::new();
            for u in &truth.users {
                if rng.random_bool(0.85) {
                    let cost = if rng.random_bool(0.5) { random_money(rng, span) } else { u.cost };
                    users.push(ReportedUser { cost, backing: u.backing });
                }
            }
            if rng.random_bool(0.3) {
                users.push(ReportedUser { cost: random_money(rng, span), backing: Backing::Fabricated });
            }
            users.shuffle(rng);
            Misreport::Mediator { report: MediatorReport { users } }
        }
    }
}

/// `k` misreports for `player`. Structural edits come first (scaling, grid
/// steps, dropped/duplicated/fake users, permutations, capacity changes and
/// reports just around every hinted price); they are kept in order up to
/// four, the rest are shuffled, and random reports fill any remainder.
pub fn generate_misreports<R: Rng + ?Sized>(
    player: PlayerRef,
    instance: &Instance,
    rng: &mut R,
    k: usize,
    hints: &[Money],
) -> Result<Vec<DeviationCase>, EconError> {
    player.check(instance)?;
    let truthful = ReportProfile::truthful(instance);
    let mut structural: Vec<Misreport> = match player {
        PlayerRef::User { mediator, user } => {
            let truth = instance.mediators()[mediator as usize].user_costs[user as usize];
            user_candidates(truth, hints).into_iter().map(|cost| Misreport::UserCost { cost }).collect()
        }
        PlayerRef::Mediator { index } => mediator_candidates(&truthful.mediators[index as usize], hints)
            .into_iter()
            .map(|report| Misreport::Mediator { report })
            .collect(),
        PlayerRef::Advertiser { index } => {
            advertiser_candidates(truthful.advertisers[index as usize], hints)
                .into_iter()
                .map(|report| Misreport::Advertiser { report })
                .collect()
        }
    };
    let head = structural.len().min(4);
    structural[head..].shuffle(rng);
    structural.truncate(k);
    let span = instance
        .advertisers()
        .iter()
        .map(|a| a.value)
        .chain(instance.mediators().iter().flat_map(|m| m.user_costs.iter().copied()))
        .max()
        .unwrap_or(Money::from_units(1))
        * 2;
    while structural.len() < k {
        structural.push(random_case(player, instance, rng, span));
    }
    Ok(structural.into_iter().map(|misreport| DeviationCase { player, misreport }).collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedVerdict {
    pub seed: u64,
    pub truthful: Utility,
    pub deviant: Utility,
}

impl SeedVerdict {
    pub fn passed(&self) -> bool {
        self.truthful >= self.deviant
    }
}

/// Truthful runs of one instance on a fixed seed set, reused as the baseline
/// for any number of deviations. Paired runs share the seed and therefore
/// the arrival order and the observation count.
pub struct PairedRunner<'a> {
    instance: &'a Instance,
    truthful: ReportProfile,
    configs: Vec<MechanismConfig>,
    outcomes: Vec<MechanismOutcome>,
}

impl<'a> PairedRunner<'a> {
    pub fn new(instance: &'a Instance, alpha: &Ratio, seeds: &[u64], variant: EngineVariant) -> Result<Self, EconError> {
        let truthful = ReportProfile::truthful(instance);
        let mut configs = Vec::with_capacity(seeds.len());
        let mut outcomes = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut config = MechanismConfig::new(alpha.clone(), seed)?;
            config.variant = variant;
            outcomes.push(run_mechanism(instance, &truthful, &config)?);
            configs.push(config);
        }
        Ok(PairedRunner { instance, truthful, configs, outcomes })
    }

    pub fn outcomes(&self) -> &[MechanismOutcome] {
        &self.outcomes
    }

    pub fn hints(&self) -> Vec<Money> {
        threshold_hints(&self.outcomes)
    }

    pub fn truthful(&self) -> &ReportProfile {
        &self.truthful
    }

    /// Deviant profile and its outcome on every seed, next to the verdicts.
    pub fn run_case(&self, case: &DeviationCase) -> Result<CaseRuns, EconError> {
        let reports = case.apply(&self.truthful)?;
        let mut verdicts = Vec::with_capacity(self.configs.len());
        let mut outcomes = Vec::with_capacity(self.configs.len());
        for (config, base) in self.configs.iter().zip(&self.outcomes) {
            let deviant = run_mechanism(self.instance, &reports, config)?;
            verdicts.push(SeedVerdict {
                seed: config.seed,
                truthful: final_utility(self.instance, &self.truthful, base, case.player)?,
                deviant: final_utility(self.instance, &reports, &deviant, case.player)?,
            });
            outcomes.push(deviant);
        }
        Ok(CaseRuns { reports, verdicts, outcomes })
    }

    pub fn test(&self, case: &DeviationCase) -> Result<Vec<SeedVerdict>, EconError> {
        Ok(self.run_case(case)?.verdicts)
    }
}

pub struct CaseRuns {
    pub reports: ReportProfile,
    pub verdicts: Vec<SeedVerdict>,
    pub outcomes: Vec<MechanismOutcome>,
}

pub fn deviation_test(
    instance: &Instance,
    case: &DeviationCase,
    alpha: &Ratio,
    seeds: &[u64],
) -> Result<Vec<SeedVerdict>, EconError> {
    PairedRunner::new(instance, alpha, seeds, EngineVariant::Faithful)?.test(case)
}
