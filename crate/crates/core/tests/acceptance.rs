//! End-to-end acceptance checks. Each test writes one verdict line to stderr
//! that survives output capture.

use std::io::Write;
use std::sync::OnceLock;

use opm_core::analysis::{
    competitive_ratio_experiment, compute_diagnostic_sets, event_frequency_experiment, matched_family,
};
use opm_core::canonical::{brute_force_optimal_gft, full_canonical};
use opm_core::econ::{run_sweep, Check, SweepConfig, SweepReport};
use opm_core::engine::{run_mechanism, EngineVariant, MechanismConfig};
use opm_core::io::format::{from_json, to_canonical_json};
use opm_core::io::generator::generate_instance;
use opm_core::io::report::{build_run_report, replay, RunReport};
use opm_core::market::{AdvertiserSpec, Instance, MediatorSpec, ReportProfile, TieOrder};
use opm_core::money::Money;
use opm_core::rational::{parse_ratio, Ratio};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("[acceptance {id:02}] {name}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn q(s: &str) -> Ratio {
    parse_ratio(s).unwrap()
}

/// Truthful audits over 1000 instances x 10 seeds, shared by several checks.
fn truthful_corpus() -> &'static SweepReport {
    static CORPUS: OnceLock<SweepReport> = OnceLock::new();
    CORPUS.get_or_init(|| {
        let config = SweepConfig { instances: 1000, seeds: 10, incentives: false, base_seed: 101, ..SweepConfig::default() };
        run_sweep(&config).unwrap()
    })
}

/// 200 instances x 20 misreports per role x 20 paired seeds.
fn incentive_sweep() -> &'static SweepReport {
    static SWEEP: OnceLock<SweepReport> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let config = SweepConfig { instances: 200, seeds: 20, misreports: 20, base_seed: 202, ..SweepConfig::default() };
        run_sweep(&config).unwrap()
    })
}

fn small_market<R: Rng>(rng: &mut R) -> Instance {
    let users = rng.random_range(0..=6usize);
    let slots = rng.random_range(0..=6usize);
    let whole = rng.random_bool(0.5);
    let amount = |rng: &mut R| {
        if whole {
            Money::from_units(rng.random_range(0..=6))
        } else {
            Money::from_micros(rng.random_range(0..=6_000_000))
        }
    };
    let mut mediators = Vec::new();
    let mut left = users;
    while left > 0 {
        let n = rng.random_range(1..=left);
        mediators.push(MediatorSpec { user_costs: (0..n).map(|_| amount(rng)).collect() });
        left -= n;
    }
    let mut advertisers = Vec::new();
    let mut left = slots;
    while left > 0 {
        let capacity = rng.random_range(1..=left);
        advertisers.push(AdvertiserSpec { capacity: capacity as u32, value: amount(rng) });
        left -= capacity;
    }
    let tie = TieOrder::random(mediators.len(), advertisers.len(), rng);
    Instance::new(mediators, advertisers, tie).unwrap()
}

#[test]
fn acceptance_01_canonical_optimality() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let inst = small_market(&mut rng);
        let costs: Vec<Money> = inst.mediators().iter().flat_map(|m| m.user_costs.iter().copied()).collect();
        let values: Vec<Money> =
            inst.advertisers().iter().flat_map(|a| std::iter::repeat_n(a.value, a.capacity as usize)).collect();
        if full_canonical(&inst).gain_from_trade() != brute_force_optimal_gft(&costs, &values).unwrap() {
            mismatches += 1;
        }
    }
    verdict(1, "canonical optimality", mismatches == 0, &format!("10000 instances, {mismatches} mismatches"));
    assert_eq!(mismatches, 0);
}

#[test]
fn acceptance_02_budget_balance() {
    let r = truthful_corpus();
    let n = r.count(Check::BudgetBalance);
    let ok = n == 0 && r.truthful_runs == 10_000 && r.trades > 0;
    verdict(2, "budget balance", ok, &format!("{} runs, {} trades, {n} violations", r.truthful_runs, r.trades));
    assert!(ok, "{:?}", r.examples);
}

#[test]
fn acceptance_03_continuous_ir() {
    let r = truthful_corpus();
    let n = r.count(Check::ContinuousIr);
    verdict(3, "continuous individual rationality", n == 0, &format!("{} runs, {n} violations", r.truthful_runs));
    assert_eq!(n, 0, "{:?}", r.examples);
}

#[test]
fn acceptance_04_incentive_compatibility() {
    let r = incentive_sweep();
    let profitable = r.count(Check::IncentiveCompatibility);
    let covered = r.roles.values().all(|t| t.cases >= 200 * 20 && t.paired_runs >= 200 * 20 * 20 && t.changed > 0);
    let detail = r
        .roles
        .iter()
        .map(|(role, t)| format!("{role:?} {}/{} changed", t.changed, t.paired_runs))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(4, "incentive compatibility", profitable == 0 && covered, &format!("{profitable} profitable; {detail}"));
    assert!(covered);
    assert_eq!(profitable, 0, "{:?}", r.examples);
}

#[test]
fn acceptance_05_surplus_and_legality() {
    let runs: Vec<&SweepReport> = vec![truthful_corpus(), incentive_sweep()];
    let checks = [Check::SurplusInvariant, Check::OnlineLegality, Check::TargetMonotonicity];
    let total: usize = runs.iter().flat_map(|r| checks.iter().map(|&c| r.count(c))).sum();
    let audited: usize = runs.iter().map(|r| r.truthful_runs + r.deviant_runs).sum();
    verdict(5, "surplus invariant and online legality", total == 0, &format!("{audited} runs, {total} violations"));
    assert_eq!(total, 0);
}

#[test]
fn acceptance_06_negative_controls() {
    let mut details = Vec::new();
    let mut ok = true;
    for variant in [EngineVariant::PaySlotPrice, EngineVariant::SkipPaymentUpdates] {
        let config = SweepConfig { instances: 20, seeds: 5, misreports: 5, variant, base_seed: 606, ..SweepConfig::default() };
        let r = run_sweep(&config).unwrap();
        let caught: usize =
            [Check::BudgetBalance, Check::ContinuousIr, Check::IncentiveCompatibility].iter().map(|&c| r.count(c)).sum();
        ok &= caught > 0;
        details.push(format!("{variant:?} caught {caught} times"));
    }
    verdict(6, "negative controls", ok, &details.join(", "));
    assert!(ok);
}

#[test]
fn acceptance_07_deterministic_replay() {
    let mut exact = 0;
    for i in 0..100u64 {
        let alpha = if i % 2 == 0 { q("1/20") } else { q("1/80") };
        let inst = generate_instance(&matched_family(&alpha, 7000 + i, i % 3 == 0)).unwrap();
        let config = MechanismConfig::new(alpha, i).unwrap();
        let report = build_run_report(&inst, None, &config, i % 4 == 0).unwrap();
        let parsed: RunReport = from_json(&to_canonical_json(&report)).unwrap();
        if replay(&parsed).unwrap().bit_exact {
            exact += 1;
        }
    }
    verdict(7, "deterministic replay", exact == 100, &format!("{exact}/100 bit-exact"));
    assert_eq!(exact, 100);
}

#[test]
fn acceptance_08_pivot_and_size_sandwiches() {
    let alphas = [q("1/5"), q("1/20"), q("1/80"), q("1/200")];
    let (mut runs, mut pivot, mut sizes, mut inclusion, mut band) = (0, 0, 0, 0, 0);
    for (k, alpha) in alphas.iter().enumerate() {
        for s in 0..250u64 {
            let seed = 8000 + 1000 * k as u64 + s;
            let inst = generate_instance(&matched_family(alpha, seed, s % 2 == 1)).unwrap();
            let config = MechanismConfig::new(alpha.clone(), seed).unwrap();
            let out = run_mechanism(&inst, &ReportProfile::truthful(&inst), &config).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sets = compute_diagnostic_sets(&inst, &out, &config.r, alpha, &mut rng).unwrap();
            runs += 1;
            pivot += usize::from(!sets.checks.pivot_sandwich);
            sizes += usize::from(!sets.checks.observed_size_sandwich);
            band += usize::from(sets.flags.e_prime());
            inclusion += usize::from(!sets.checks.inclusion_under_band);
        }
    }
    let ok = pivot == 0 && sizes == 0;
    verdict(
        8,
        "pivot and observed-size sandwiches",
        ok,
        &format!("{runs} runs, {pivot} pivot and {sizes} size violations; inclusion failed {inclusion} times in {band} band runs"),
    );
    assert_eq!(runs, 1000);
    assert!(ok);
}

#[test]
fn acceptance_09_ratio_trend() {
    let alphas = [q("1/5"), q("1/20"), q("1/80")];
    let family = |alpha: &Ratio, seed: u64| matched_family(alpha, seed, false);
    let points = competitive_ratio_experiment(&family, &alphas, 500, 909, None).unwrap();
    let mut trend = true;
    for pair in points.windows(2) {
        let step = pair[1].ratio.mean - pair[0].ratio.mean;
        let noise = 2.0 * (pair[0].ratio.stderr.powi(2) + pair[1].ratio.stderr.powi(2)).sqrt();
        trend &= step >= -noise;
    }
    let last = points.last().unwrap().ratio.mean;
    let ok = trend && last >= 0.5 && points.iter().all(|p| p.runs >= 500);
    let means =
        points.iter().map(|p| format!("alpha {} mean {:.4} se {:.4}", p.alpha, p.ratio.mean, p.ratio.stderr)).collect::<Vec<_>>();
    verdict(9, "ratio trend", ok, &format!("{}; trend {}", means.join(", "), if trend { "holds" } else { "broken" }));
    assert!(trend, "{points:?}");
    assert!(last >= 0.5, "mean ratio {last} at the smallest alpha is below 0.5");
}

#[test]
fn acceptance_10_event_frequencies() {
    let alphas = [q("1/5"), q("1/20"), q("1/80")];
    let family = |alpha: &Ratio, seed: u64| matched_family(alpha, seed, false);
    let points = event_frequency_experiment(&family, &alphas, 1000, 1010, None).unwrap();
    let ok = points.iter().all(|p| p.meets_bound() && p.runs >= 1000);
    let detail = points
        .iter()
        .map(|p| {
            format!(
                "alpha {}: E {:.4} vs bound {:.4}, E' {:.4} [{:.4}, {:.4}]",
                p.alpha, p.e.rate, p.bound_clamped, p.e_prime.rate, p.e_prime.wilson_low, p.e_prime.wilson_high
            )
        })
        .collect::<Vec<_>>();
    verdict(10, "event frequencies", ok, &detail.join("; "));
    assert!(ok, "{points:?}");
}
