//! Competitive-ratio and event-frequency experiments, and the sets used to
//! reason about a single run: the optimal prefix, its shrunk core, the
//! assignable sets, the late-arrival tail and the concentration events.

mod stats;

use std::collections::BTreeSet;

use num::Signed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use stats::{quantile, wilson_interval, Frequency, Summary};

use crate::canonical::{canonical_assignment, full_canonical};
use crate::engine::{run_mechanism, EngineError, MechanismConfig, MechanismOutcome};
use crate::io::generator::{generate_instance, CountDist, GeneratorConfig, GeneratorError, MoneyDist};
use crate::market::{gain_from_trade, EntityId, EntityKind, Instance, ReportProfile, SlotRef, UserRef};
use crate::money::Money;
use crate::rational::{
    at_most_cube_root, derive_r, format_ratio, ratio_to_f64, shrunk_prefix_len,
    within_cube_root_band, Ratio,
};

/// Location multiplier of the shrunk optimal core.
pub const CORE_FACTOR: u32 = 6;
/// Multiplier of the tail-sampling probability.
pub const TAIL_FACTOR: u32 = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("the optimum of the market is empty")]
    EmptyOptimum,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error("alpha {0} is outside (0, 1]")]
    Alpha(String),
}

/// The band inequalities on the observed share of the optimum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandFlags {
    pub slots: bool,
    pub users: bool,
    pub core_slots: bool,
    pub core_users: bool,
}

impl BandFlags {
    pub fn all(&self) -> bool {
        self.slots && self.users && self.core_slots && self.core_users
    }
}

/// The five consequences that the high-probability event is shown to imply.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsequenceFlags {
    /// Core slots of unobserved advertisers are assignable.
    pub core_slots_assignable: bool,
    /// Core users of unobserved mediators are assignable.
    pub core_users_assignable: bool,
    /// Assignable users outside the tail fit into the assignable slots.
    pub users_outside_tail_fit: bool,
    /// Assignable slots outside the tail fit the assignable users.
    pub slots_outside_tail_fit: bool,
    /// Every assignable cost and value sits on its side of the pivot.
    pub pivot_separates: bool,
}

impl ConsequenceFlags {
    pub fn all(&self) -> bool {
        self.core_slots_assignable
            && self.core_users_assignable
            && self.users_outside_tail_fit
            && self.slots_outside_tail_fit
            && self.pivot_separates
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventFlags {
    pub band: BandFlags,
    /// `|B_hat \ B(A_L)| <= |P_hat|`.
    pub slots_outside_tail_fit: bool,
    /// `|P_hat \ P(M_L)| <= |B_hat|`.
    pub users_outside_tail_fit: bool,
    pub consequences: ConsequenceFlags,
}

impl EventFlags {
    pub fn e_prime(&self) -> bool {
        self.band.all()
    }

    pub fn e(&self) -> bool {
        self.e_prime() && self.slots_outside_tail_fit && self.users_outside_tail_fit
    }
}

/// Facts that hold on every run whatever the coins.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeterministicChecks {
    /// `c(p) <= ell <= v(b)` on the optimal prefix.
    pub pivot_sandwich: bool,
    /// `min <= |S_c(observed)| <= max` of the observed optimal shares.
    pub observed_size_sandwich: bool,
    /// Under the band event, assignable users and slots lie in the optimal prefix.
    pub inclusion_under_band: bool,
}

impl DeterministicChecks {
    pub fn all(&self) -> bool {
        self.pivot_sandwich && self.observed_size_sandwich && self.inclusion_under_band
    }
}

/// Sets built from the true parameters of one truthful run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosticSets {
    pub tau: usize,
    pub p_o: Vec<UserRef>,
    pub b_o: Vec<SlotRef>,
    pub tilde_p: Vec<UserRef>,
    pub tilde_b: Vec<SlotRef>,
    pub hat_p: Vec<UserRef>,
    pub hat_b: Vec<SlotRef>,
    /// Value of the slot at location `tau` of the optimum.
    pub ell: Money,
    pub f: usize,
    /// Last `f` post-observation arrivals.
    pub tail: Vec<EntityId>,
    pub observed_optimum: usize,
    pub flags: EventFlags,
    pub checks: DeterministicChecks,
}

/// `min{16 alpha^(1/3) / r, 1}` as a sampling probability; exactly 1 when the
/// product reaches 1.
fn tail_probability(r: &Ratio, alpha: &Ratio) -> f64 {
    let cutoff = r / Ratio::from_integer(TAIL_FACTOR.into());
    if at_most_cube_root(&cutoff, alpha) {
        1.0
    } else {
        (f64::from(TAIL_FACTOR) * ratio_to_f64(alpha).cbrt() / ratio_to_f64(r)).min(1.0)
    }
}

pub fn compute_diagnostic_sets<R: Rng + ?Sized>(
    instance: &Instance,
    outcome: &MechanismOutcome,
    r: &Ratio,
    alpha: &Ratio,
    rng: &mut R,
) -> Result<DiagnosticSets, AnalysisError> {
    let optimum = full_canonical(instance);
    let tau = optimum.len();
    if tau == 0 {
        return Err(AnalysisError::EmptyOptimum);
    }
    let p_o: Vec<UserRef> = optimum.matched_users().iter().map(|u| u.user).collect();
    let b_o: Vec<SlotRef> = optimum.matched_slots().iter().map(|s| s.slot).collect();
    let core = shrunk_prefix_len(tau, CORE_FACTOR, alpha, r).unwrap_or(0);
    let tilde_p = p_o[..core].to_vec();
    let tilde_b = b_o[..core].to_vec();
    let ell = optimum.sorted_slots()[tau - 1].key.amount;

    let observed_m: BTreeSet<u32> = outcome.observed_mediators.iter().copied().collect();
    let observed_a: BTreeSet<u32> = outcome.observed_advertisers.iter().copied().collect();
    let thresholds = outcome.thresholds;
    let hat_p: Vec<UserRef> = instance
        .keyed_users(None)
        .into_iter()
        .filter(|u| !observed_m.contains(&u.user.mediator) && thresholds.user_assignable(&u.key))
        .map(|u| u.user)
        .collect();
    let hat_b: Vec<SlotRef> = instance
        .keyed_slots(None)
        .into_iter()
        .filter(|s| !observed_a.contains(&s.slot.advertiser) && thresholds.slot_assignable(&s.key))
        .map(|s| s.slot)
        .collect();

    let post = &outcome.arrival_order[outcome.observation_count..];
    let p = tail_probability(r, alpha);
    let f = (0..post.len()).filter(|_| rng.random_bool(p)).count();
    let tail = post[post.len() - f..].to_vec();
    let tail_m: BTreeSet<u32> = tail.iter().filter(|e| e.kind == EntityKind::Mediator).map(|e| e.index).collect();
    let tail_a: BTreeSet<u32> = tail.iter().filter(|e| e.kind == EntityKind::Advertiser).map(|e| e.index).collect();

    let obs_users = |set: &[UserRef]| set.iter().filter(|u| observed_m.contains(&u.mediator)).count();
    let obs_slots = |set: &[SlotRef]| set.iter().filter(|s| observed_a.contains(&s.advertiser)).count();
    let band = BandFlags {
        slots: within_cube_root_band(obs_slots(&b_o), b_o.len(), r, alpha, tau),
        users: within_cube_root_band(obs_users(&p_o), p_o.len(), r, alpha, tau),
        core_slots: within_cube_root_band(obs_slots(&tilde_b), tilde_b.len(), r, alpha, tau),
        core_users: within_cube_root_band(obs_users(&tilde_p), tilde_p.len(), r, alpha, tau),
    };
    let hat_p_set: BTreeSet<UserRef> = hat_p.iter().copied().collect();
    let hat_b_set: BTreeSet<SlotRef> = hat_b.iter().copied().collect();
    let users_outside_tail = hat_p.iter().filter(|u| !tail_m.contains(&u.mediator)).count();
    let slots_outside_tail = hat_b.iter().filter(|s| !tail_a.contains(&s.advertiser)).count();
    let max_hat_cost = hat_p.iter().map(|&u| instance.user_key(u).expect("own user").amount).max();
    let min_hat_value = hat_b.iter().map(|&s| instance.slot_key(s).expect("own slot").amount).min();
    let consequences = ConsequenceFlags {
        core_slots_assignable: tilde_b
            .iter()
            .filter(|s| !observed_a.contains(&s.advertiser))
            .all(|s| hat_b_set.contains(s)),
        core_users_assignable: tilde_p
            .iter()
            .filter(|u| !observed_m.contains(&u.mediator))
            .all(|u| hat_p_set.contains(u)),
        users_outside_tail_fit: users_outside_tail <= hat_b.len(),
        slots_outside_tail_fit: slots_outside_tail <= hat_p.len(),
        pivot_separates: max_hat_cost.is_none_or(|c| c <= ell) && min_hat_value.is_none_or(|v| ell <= v),
    };
    let flags = EventFlags {
        band,
        slots_outside_tail_fit: slots_outside_tail <= hat_p.len(),
        users_outside_tail_fit: users_outside_tail <= hat_b.len(),
        consequences,
    };

    let observed_m_list: Vec<u32> = observed_m.iter().copied().collect();
    let observed_a_list: Vec<u32> = observed_a.iter().copied().collect();
    let observed_optimum = canonical_assignment(
        instance.keyed_users(Some(&observed_m_list)),
        instance.keyed_slots(Some(&observed_a_list)),
    )
    .len();
    let (po_t, bo_t) = (obs_users(&p_o), obs_slots(&b_o));
    let p_o_set: BTreeSet<UserRef> = p_o.iter().copied().collect();
    let b_o_set: BTreeSet<SlotRef> = b_o.iter().copied().collect();
    let max_po_cost = optimum.matched_users().iter().map(|u| u.key.amount).max().expect("tau > 0");
    let min_bo_value = optimum.matched_slots().iter().map(|s| s.key.amount).min().expect("tau > 0");
    let checks = DeterministicChecks {
        pivot_sandwich: max_po_cost <= ell && ell <= min_bo_value,
        observed_size_sandwich: po_t.min(bo_t) <= observed_optimum && observed_optimum <= po_t.max(bo_t),
        inclusion_under_band: !band.all()
            || (hat_p.iter().all(|u| p_o_set.contains(u)) && hat_b.iter().all(|s| b_o_set.contains(s))),
    };

    Ok(DiagnosticSets {
        tau,
        p_o,
        b_o,
        tilde_p,
        tilde_b,
        hat_p,
        hat_b,
        ell,
        f,
        tail,
        observed_optimum,
        flags,
        checks,
    })
}

fn cube_root(alpha: &Ratio) -> f64 {
    ratio_to_f64(alpha).cbrt()
}

/// `1 - 10 e^(-2 / alpha^(1/3))`.
pub fn event_bound(alpha: &Ratio) -> f64 {
    1.0 - 10.0 * (-2.0 / cube_root(alpha)).exp()
}

/// `1 - r - 22 alpha^(1/3) / r - 10 e^(-2 / alpha^(1/3))`.
pub fn ratio_bound(alpha: &Ratio, r: &Ratio) -> f64 {
    let r = ratio_to_f64(r);
    1.0 - r - 22.0 * cube_root(alpha) / r - 10.0 * (-2.0 / cube_root(alpha)).exp()
}

/// `1 - 9.5 alpha^(1/6) - 10 e^(-2 / alpha^(1/3))`.
pub fn headline_bound(alpha: &Ratio) -> f64 {
    1.0 - 9.5 * ratio_to_f64(alpha).powf(1.0 / 6.0) - 10.0 * (-2.0 / cube_root(alpha)).exp()
}

/// A generator family whose optimum scales like `5 / alpha`, so that the
/// size promise holds at `alpha` with entities of up to five users or slots.
pub fn matched_family(alpha: &Ratio, seed: u64, lognormal: bool) -> GeneratorConfig {
    let (cost, value) = if lognormal {
        (MoneyDist::LogNormal { mu: 1.0, sigma: 0.75 }, MoneyDist::LogNormal { mu: 1.5, sigma: 0.75 })
    } else {
        (
            MoneyDist::Uniform { low: Money::ZERO, high: Money::from_units(10) },
            MoneyDist::Uniform { low: Money::ZERO, high: Money::from_units(10) },
        )
    };
    let tau = (5.0 / ratio_to_f64(alpha)).ceil() as usize;
    GeneratorConfig {
        mediators: 1,
        advertisers: 1,
        users_per_mediator: CountDist::Uniform { low: 1, high: 5 },
        capacity: CountDist::Uniform { low: 1, high: 5 },
        cost,
        value,
        grid: Money::from_micros(10_000),
        target_alpha: alpha.clone(),
        seed,
        max_retries: 64,
        scale_to_fit: true,
    }
    .sized_for_tau(tau)
}

/// How instances are drawn for an experiment at a given `alpha`.
pub trait Family: Sync {
    fn config(&self, alpha: &Ratio, seed: u64) -> GeneratorConfig;
}

impl<F: Fn(&Ratio, u64) -> GeneratorConfig + Sync> Family for F {
    fn config(&self, alpha: &Ratio, seed: u64) -> GeneratorConfig {
        self(alpha, seed)
    }
}

pub(crate) fn seed_for(base: u64, alpha_index: usize, run: usize) -> u64 {
    // splitmix-style spreading so neighbouring runs do not share streams
    let mut z = base
        .wrapping_add((alpha_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((run as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_alpha(alpha: &Ratio) -> Result<Ratio, AnalysisError> {
    derive_r(alpha).ok_or_else(|| AnalysisError::Alpha(format_ratio(alpha)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioPoint {
    pub alpha: String,
    pub r: String,
    pub runs: usize,
    pub skipped: usize,
    pub mean_tau: f64,
    pub dummy_rate: f64,
    pub ratio: Summary,
    pub bound_raw: f64,
    pub bound_clamped: f64,
    pub headline_raw: f64,
    pub headline_clamped: f64,
}

/// Ratio, optimum size and whether the prices were dummy.
type RunRatio = (f64, usize, bool);

/// Ratio of the mechanism's gain from trade to the optimum over `runs` fresh
/// instances per `alpha`, each run on its own instance and coin seed.
pub fn competitive_ratio_experiment(
    family: &dyn Family,
    alphas: &[Ratio],
    runs: usize,
    base_seed: u64,
    r_override: Option<&Ratio>,
) -> Result<Vec<RatioPoint>, AnalysisError> {
    let mut points = Vec::with_capacity(alphas.len());
    for (ai, alpha) in alphas.iter().enumerate() {
        let r = match r_override {
            Some(r) => r.clone(),
            None => check_alpha(alpha)?,
        };
        let results: Vec<Result<Option<RunRatio>, AnalysisError>> = (0..runs)
            .into_par_iter()
            .map(|run| {
                let seed = seed_for(base_seed, ai, run);
                let instance = generate_instance(&family.config(alpha, seed))?;
                let optimum = full_canonical(&instance);
                let best = optimum.gain_from_trade();
                if best <= Money::ZERO {
                    return Ok(None);
                }
                let config = MechanismConfig::new(alpha.clone(), seed)?.with_r(r.clone());
                let outcome = run_mechanism(&instance, &ReportProfile::truthful(&instance), &config)?;
                let got = gain_from_trade(&outcome.assignment, &instance).expect("outcome refers to the instance");
                Ok(Some((got.to_f64() / best.to_f64(), optimum.len(), outcome.thresholds.is_dummy())))
            })
            .collect();
        let mut ratios = Vec::with_capacity(runs);
        let (mut skipped, mut taus, mut dummies) = (0usize, 0usize, 0usize);
        for res in results {
            match res? {
                Some((ratio, tau, dummy)) => {
                    ratios.push(ratio);
                    taus += tau;
                    dummies += usize::from(dummy);
                }
                None => skipped += 1,
            }
        }
        let n = ratios.len().max(1) as f64;
        let bound_raw = ratio_bound(alpha, &r);
        let headline_raw = headline_bound(alpha);
        points.push(RatioPoint {
            alpha: format_ratio(alpha),
            r: format_ratio(&r),
            runs: ratios.len(),
            skipped,
            mean_tau: taus as f64 / n,
            dummy_rate: dummies as f64 / n,
            ratio: Summary::of(&ratios),
            bound_raw,
            bound_clamped: bound_raw.max(0.0),
            headline_raw,
            headline_clamped: headline_raw.max(0.0),
        });
    }
    Ok(points)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventPoint {
    pub alpha: String,
    pub r: String,
    pub runs: usize,
    pub e_prime: Frequency,
    pub e: Frequency,
    pub band_slots: Frequency,
    pub band_users: Frequency,
    pub band_core_slots: Frequency,
    pub band_core_users: Frequency,
    pub slots_outside_tail_fit: Frequency,
    pub users_outside_tail_fit: Frequency,
    /// Runs where the event held but one of its consequences did not.
    pub consequence_failures_given_e: usize,
    pub deterministic_failures: usize,
    pub bound_raw: f64,
    pub bound_clamped: f64,
}

impl EventPoint {
    pub fn meets_bound(&self) -> bool {
        self.e.rate >= self.bound_clamped
    }
}

/// Monte-Carlo frequencies of the concentration events over `runs` fresh
/// instances per `alpha`.
pub fn event_frequency_experiment(
    family: &dyn Family,
    alphas: &[Ratio],
    runs: usize,
    base_seed: u64,
    r_override: Option<&Ratio>,
) -> Result<Vec<EventPoint>, AnalysisError> {
    let mut points = Vec::with_capacity(alphas.len());
    for (ai, alpha) in alphas.iter().enumerate() {
        let r = match r_override {
            Some(r) => r.clone(),
            None => check_alpha(alpha)?,
        };
        let sets: Vec<DiagnosticSets> = (0..runs)
            .into_par_iter()
            .map(|run| {
                let seed = seed_for(base_seed, ai, run);
                let instance = generate_instance(&family.config(alpha, seed))?;
                let config = MechanismConfig::new(alpha.clone(), seed)?.with_r(r.clone());
                let outcome = run_mechanism(&instance, &ReportProfile::truthful(&instance), &config)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7461_696c);
                compute_diagnostic_sets(&instance, &outcome, &r, alpha, &mut rng)
            })
            .collect::<Result<_, _>>()?;
        let count = |pred: &dyn Fn(&DiagnosticSets) -> bool| Frequency::new(sets.iter().filter(|s| pred(s)).count(), sets.len());
        let bound_raw = event_bound(alpha);
        points.push(EventPoint {
            alpha: format_ratio(alpha),
            r: format_ratio(&r),
            runs: sets.len(),
            e_prime: count(&|s| s.flags.e_prime()),
            e: count(&|s| s.flags.e()),
            band_slots: count(&|s| s.flags.band.slots),
            band_users: count(&|s| s.flags.band.users),
            band_core_slots: count(&|s| s.flags.band.core_slots),
            band_core_users: count(&|s| s.flags.band.core_users),
            slots_outside_tail_fit: count(&|s| s.flags.slots_outside_tail_fit),
            users_outside_tail_fit: count(&|s| s.flags.users_outside_tail_fit),
            consequence_failures_given_e: sets.iter().filter(|s| s.flags.e() && !s.flags.consequences.all()).count(),
            deterministic_failures: sets.iter().filter(|s| !s.checks.all()).count(),
            bound_raw,
            bound_clamped: bound_raw.max(0.0),
        });
    }
    Ok(points)
}

/// `true` when `alpha` makes the price location non-positive at `r`, so
/// every run posts dummy thresholds.
pub fn always_dummy(alpha: &Ratio, r: &Ratio) -> bool {
    let cutoff = r / Ratio::from_integer(crate::engine::PRICE_LOCATION_FACTOR.into());
    !cutoff.is_positive() || at_most_cube_root(&cutoff, alpha)
}

/// Expected fraction `1 - 2 alpha^(1/3) / r` of the observed optimum kept
/// below the price, clamped at zero.
pub fn price_location_fraction(alpha: &Ratio, r: &Ratio) -> f64 {
    (1.0 - 2.0 * cube_root(alpha) / ratio_to_f64(r)).max(0.0)
}
