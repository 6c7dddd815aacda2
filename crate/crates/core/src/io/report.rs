//! Self-contained run reports: everything needed to re-execute a run, its
//! summary and audit verdicts, and a digest of the full outcome.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::format::{FormatError, InstanceDoc, ReportsDoc, SCHEMA_VERSION};
use crate::analysis::{compute_diagnostic_sets, DeterministicChecks, EventFlags};
use crate::canonical::full_canonical;
use crate::econ::{
    check_budget_balance, check_online_legality, check_surplus_invariant, check_target_monotonicity,
    continuous_ir_failures,
};
use crate::engine::{run_mechanism, EngineError, MechanismConfig, MechanismOutcome};
use crate::market::{gain_from_trade, Instance, ReportProfile};
use crate::money::Money;

/// Keeps the diagnostic tail draw off the mechanism's own stream.
const DIAGNOSTIC_SALT: u64 = 0xD1A6_0517_C5E7_5EED;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReportError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("unsupported run report: {0}")]
    Unsupported(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub tau: usize,
    pub gft: Money,
    pub opt_gft: Money,
    pub ratio: Option<f64>,
    pub dummy_thresholds: bool,
    pub p_hat_cost: Option<Money>,
    pub b_hat_value: Option<Money>,
    pub observation_count: usize,
    pub trades: usize,
    pub total_charges: Money,
    pub total_payments: Money,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunVerdicts {
    pub budget_balance: bool,
    /// Only judged when every report is truthful.
    pub continuous_ir: Option<bool>,
    pub surplus_invariant: bool,
    pub online_legality: bool,
    pub target_monotonicity: bool,
}

impl RunVerdicts {
    pub fn passed(&self) -> bool {
        self.budget_balance
            && self.continuous_ir != Some(false)
            && self.surplus_invariant
            && self.online_legality
            && self.target_monotonicity
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosticSummary {
    pub ell: Money,
    pub f: usize,
    pub observed_optimum: usize,
    pub tilde_size: usize,
    pub hat_p: usize,
    pub hat_b: usize,
    pub flags: EventFlags,
    pub checks: DeterministicChecks,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub kind: String,
    pub config: MechanismConfig,
    pub instance: InstanceDoc,
    /// Absent when every player reported truthfully.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reports: Option<ReportsDoc>,
    pub summary: RunSummary,
    pub verdicts: RunVerdicts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<DiagnosticSummary>,
    /// SHA-256 of the outcome's compact JSON.
    pub outcome_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<MechanismOutcome>,
}

pub fn outcome_digest(outcome: &MechanismOutcome) -> String {
    let bytes = serde_json::to_vec(outcome).expect("outcomes serialise");
    hex::encode(Sha256::digest(bytes))
}

/// Runs the mechanism and packs the result. `reports` defaults to the truth;
/// `with_trajectory` embeds the whole per-arrival outcome.
pub fn build_run_report(
    instance: &Instance,
    reports: Option<&ReportProfile>,
    config: &MechanismConfig,
    with_trajectory: bool,
) -> Result<RunReport, ReportError> {
    let truthful = ReportProfile::truthful(instance);
    let profile = reports.unwrap_or(&truthful);
    let outcome = run_mechanism(instance, profile, config)?;
    let is_truthful = profile == &truthful;

    let optimum = full_canonical(instance);
    let gft = gain_from_trade(&outcome.assignment, profile).map_err(EngineError::from)?;
    let opt_gft = optimum.gain_from_trade();
    let summary = RunSummary {
        tau: optimum.len(),
        gft,
        opt_gft,
        ratio: (opt_gft > Money::ZERO).then(|| gft.to_f64() / opt_gft.to_f64()),
        dummy_thresholds: outcome.thresholds.is_dummy(),
        p_hat_cost: outcome.thresholds.p_hat_cost(),
        b_hat_value: outcome.thresholds.b_hat_value(),
        observation_count: outcome.observation_count,
        trades: outcome.assignment.len(),
        total_charges: outcome.total_charges(),
        total_payments: outcome.total_receipts(),
    };
    let verdicts = RunVerdicts {
        budget_balance: check_budget_balance(&outcome).passed(),
        continuous_ir: is_truthful.then(|| continuous_ir_failures(instance, profile, &outcome).is_empty()),
        surplus_invariant: check_surplus_invariant(instance, profile, &outcome).is_ok(),
        online_legality: check_online_legality(&outcome).is_ok(),
        target_monotonicity: check_target_monotonicity(&outcome).is_ok(),
    };
    let diagnostics = if is_truthful && !optimum.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ DIAGNOSTIC_SALT);
        compute_diagnostic_sets(instance, &outcome, &config.r, &config.alpha, &mut rng).ok().map(|d| {
            DiagnosticSummary {
                ell: d.ell,
                f: d.f,
                observed_optimum: d.observed_optimum,
                tilde_size: d.tilde_p.len(),
                hat_p: d.hat_p.len(),
                hat_b: d.hat_b.len(),
                flags: d.flags,
                checks: d.checks,
            }
        })
    } else {
        None
    };
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        kind: "run_report".into(),
        config: config.clone(),
        instance: InstanceDoc::from_instance(instance),
        reports: (!is_truthful).then(|| ReportsDoc::from_profile(profile)),
        summary,
        verdicts,
        diagnostics,
        outcome_digest: outcome_digest(&outcome),
        outcome: with_trajectory.then_some(outcome),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayVerdict {
    pub bit_exact: bool,
    pub expected_digest: String,
    pub actual_digest: String,
    /// `Some(false)` when an embedded trajectory differs from the re-run.
    pub trajectory_matches: Option<bool>,
}

/// Re-executes the run described by `report` and compares digests.
pub fn replay(report: &RunReport) -> Result<ReplayVerdict, ReportError> {
    if report.schema_version != SCHEMA_VERSION || report.kind != "run_report" {
        return Err(ReportError::Unsupported(format!("{} v{}", report.kind, report.schema_version)));
    }
    let instance = report.instance.to_instance()?;
    let reports = match &report.reports {
        Some(doc) => doc.to_profile()?,
        None => ReportProfile::truthful(&instance),
    };
    let outcome = run_mechanism(&instance, &reports, &report.config)?;
    let actual_digest = outcome_digest(&outcome);
    let trajectory_matches = report.outcome.as_ref().map(|o| o == &outcome);
    Ok(ReplayVerdict {
        bit_exact: actual_digest == report.outcome_digest && trajectory_matches != Some(false),
        expected_digest: report.outcome_digest.clone(),
        actual_digest,
        trajectory_matches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::tests::worked_example;
    use crate::io::format::{from_json, to_canonical_json};
    use crate::market::tests::simple_instance;
    use crate::rational::parse_ratio;

    #[test]
    fn worked_example_report() {
        let (inst, config) = worked_example();
        let report = build_run_report(&inst, None, &config, true).unwrap();
        assert_eq!(report.summary.gft, Money::from_units(10));
        assert_eq!(report.summary.opt_gft, Money::from_units(10));
        assert_eq!(report.summary.ratio, Some(1.0));
        assert_eq!(report.summary.p_hat_cost, Some(Money::from_units(4)));
        assert_eq!(report.summary.b_hat_value, Some(Money::from_units(6)));
        assert_eq!(report.summary.total_charges, Money::from_units(12));
        assert_eq!(report.summary.total_payments, Money::from_units(8));
        assert!(report.verdicts.passed());
        assert_eq!(report.verdicts.continuous_ir, Some(true));
        assert_eq!(report.outcome_digest.len(), 64);
    }

    #[test]
    fn replay_through_text_is_bit_exact() {
        let inst = simple_instance(&[&[1, 3], &[2], &[4]], &[(2, 9), (1, 6), (1, 8)]);
        for seed in 0..5 {
            let config = MechanismConfig::new(parse_ratio("1/1000").unwrap(), seed).unwrap();
            let report = build_run_report(&inst, None, &config, seed % 2 == 0).unwrap();
            let text = to_canonical_json(&report);
            let back: RunReport = from_json(&text).unwrap();
            assert_eq!(back, report);
            assert!(replay(&back).unwrap().bit_exact);
        }
    }

    #[test]
    fn tampered_report_is_not_bit_exact() {
        let (inst, config) = worked_example();
        let mut report = build_run_report(&inst, None, &config, true).unwrap();
        report.config.seed += 1;
        report.config.forced_arrival_order = None;
        let verdict = replay(&report).unwrap();
        assert!(!verdict.bit_exact);
        assert_ne!(verdict.expected_digest, verdict.actual_digest);
    }

    #[test]
    fn misreported_run_keeps_its_reports() {
        let inst = simple_instance(&[&[1, 3]], &[(2, 7)]);
        let mut reports = ReportProfile::truthful(&inst);
        reports.advertisers[0].value = Money::from_units(9);
        let (_, config) = worked_example();
        let report = build_run_report(&inst, Some(&reports), &config, false).unwrap();
        assert!(report.reports.is_some());
        assert_eq!(report.verdicts.continuous_ir, None);
        assert!(report.diagnostics.is_none());
        assert!(replay(&report).unwrap().bit_exact);
    }

    #[test]
    fn wrong_kind_rejected() {
        let (inst, config) = worked_example();
        let mut report = build_run_report(&inst, None, &config, false).unwrap();
        report.kind = "instance".into();
        assert!(matches!(replay(&report), Err(ReportError::Unsupported(_))));
    }
}
