//! The `opm` command line.
//!
//! Exit codes: 0 on success, 1 when a verification or replay fails, 2 on
//! usage errors and unreadable input.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::analysis::{competitive_ratio_experiment, event_frequency_experiment, matched_family, EventPoint, RatioPoint};
use crate::econ::{run_sweep, verification_family, Check, SweepConfig};
use crate::engine::{EngineVariant, MechanismConfig};
use crate::io::format::{from_json, parse_instance, parse_reports, serialize_instance, to_canonical_json};
use crate::io::generator::{generate_instance, GeneratorConfig};
use crate::io::report::{build_run_report, replay, RunReport};
use crate::rational::{parse_ratio, Ratio};

#[derive(Parser, Debug)]
#[command(name = "opm", version, about = "Observe-and-price mechanism for online advertising markets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a random instance that satisfies the size promise.
    Generate(GenerateArgs),
    /// Run the mechanism once and write a run report.
    Run(RunArgs),
    /// Audit budget balance, rationality, incentives and invariants.
    Verify(VerifyArgs),
    /// Competitive-ratio or event-frequency tables.
    Experiment(ExperimentArgs),
    /// Re-execute a run report and compare it bit for bit.
    Replay(ReplayArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum FamilyArg {
    Uniform,
    Lognormal,
    Verification,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Generator configuration as JSON; overrides the family flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "1/100", value_parser = ratio_arg)]
    alpha: Ratio,
    #[arg(long, value_enum, default_value_t = FamilyArg::Uniform)]
    family: FamilyArg,
    #[arg(long, env = "OPM_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    instance: PathBuf,
    /// Reported parameters; truthful when absent.
    #[arg(long)]
    reports: Option<PathBuf>,
    #[arg(long, value_parser = ratio_arg)]
    alpha: Ratio,
    /// Observation probability; derived from alpha when absent.
    #[arg(long, value_parser = ratio_arg)]
    r: Option<Ratio>,
    #[arg(long, env = "OPM_SEED", default_value_t = 0)]
    seed: u64,
    /// Embed the per-arrival trajectory.
    #[arg(long)]
    trajectory: bool,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Faithful,
    PaySlotPrice,
    SkipPaymentUpdates,
}

impl From<VariantArg> for EngineVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Faithful => EngineVariant::Faithful,
            VariantArg::PaySlotPrice => EngineVariant::PaySlotPrice,
            VariantArg::SkipPaymentUpdates => EngineVariant::SkipPaymentUpdates,
        }
    }
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, default_value_t = 200)]
    instances: usize,
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    /// Misreports per player role and instance.
    #[arg(long, default_value_t = 20)]
    misreports: usize,
    #[arg(long, default_value = "1/100", value_parser = ratio_arg)]
    alpha: Ratio,
    #[arg(long, env = "OPM_SEED", default_value_t = 0)]
    seed: u64,
    /// Skip the paired misreport runs.
    #[arg(long)]
    no_incentives: bool,
    #[arg(long, value_enum, default_value_t = VariantArg::Faithful, hide = true)]
    engine_variant: VariantArg,
    /// Write the full sweep report as JSON.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ExperimentKind {
    Ratio,
    Events,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(long, value_enum)]
    kind: ExperimentKind,
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.05,0.0125", value_parser = ratio_arg)]
    alphas: Vec<Ratio>,
    /// Runs per alpha, each on a fresh instance.
    #[arg(long, default_value_t = 500)]
    seeds: usize,
    #[arg(long, value_enum, default_value_t = FamilyArg::Uniform)]
    family: FamilyArg,
    #[arg(long, value_parser = ratio_arg)]
    r: Option<Ratio>,
    #[arg(long, env = "OPM_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    report: PathBuf,
}

fn ratio_arg(text: &str) -> std::result::Result<Ratio, String> {
    parse_ratio(text).map_err(|e| e.to_string())
}

/// Why a command did not succeed.
enum Failure {
    Checks(String),
    Input(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn family_config(family: FamilyArg, alpha: &Ratio, seed: u64) -> GeneratorConfig {
    match family {
        FamilyArg::Uniform => matched_family(alpha, seed, false),
        FamilyArg::Lognormal => matched_family(alpha, seed, true),
        FamilyArg::Verification => verification_family(alpha, seed, seed as usize),
    }
}

fn generate(args: GenerateArgs) -> Result<(), Failure> {
    let config = match &args.config {
        Some(path) => from_json::<GeneratorConfig>(&read(path)?).context("generator config")?,
        None => family_config(args.family, &args.alpha, args.seed),
    };
    let instance = generate_instance(&config).context("generating instance")?;
    emit(args.out.as_deref(), &serialize_instance(&instance))?;
    Ok(())
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let instance = parse_instance(&read(&args.instance)?).context("instance file")?;
    let reports = match &args.reports {
        Some(path) => Some(parse_reports(&read(path)?).context("reports file")?),
        None => None,
    };
    let mut config = MechanismConfig::new(args.alpha, args.seed).context("mechanism config")?;
    if let Some(r) = args.r {
        config = config.with_r(r);
    }
    let report = build_run_report(&instance, reports.as_ref(), &config, args.trajectory).context("running")?;
    let s = &report.summary;
    eprintln!(
        "tau {} gft {} of {} trades {} charges {} payments {} checks {}",
        s.tau,
        s.gft,
        s.opt_gft,
        s.trades,
        s.total_charges,
        s.total_payments,
        if report.verdicts.passed() { "pass" } else { "FAIL" }
    );
    emit(args.out.as_deref(), &to_canonical_json(&report))?;
    Ok(())
}

fn verify(args: VerifyArgs) -> Result<(), Failure> {
    let config = SweepConfig {
        instances: args.instances,
        seeds: args.seeds,
        misreports: args.misreports,
        alpha: args.alpha,
        base_seed: args.seed,
        variant: args.engine_variant.into(),
        truthful_audits: true,
        incentives: !args.no_incentives,
    };
    let report = run_sweep(&config).context("verification sweep")?;
    println!(
        "{} truthful runs ({} priced, {} trades), {} paired deviant runs",
        report.truthful_runs, report.priced_runs, report.trades, report.deviant_runs
    );
    for check in Check::ALL {
        let n = report.count(check);
        println!("{:<24} {}", format!("{check:?}"), if n == 0 { "pass".to_string() } else { format!("FAIL ({n})") });
    }
    for (role, tally) in &report.roles {
        println!(
            "  {role:?}: {} cases, {} paired runs, {} changed utility, {} profitable",
            tally.cases, tally.paired_runs, tally.changed, tally.profitable
        );
    }
    for v in &report.examples {
        println!("  {:?} instance {} seed {}: {}", v.check, v.instance, v.seed, v.detail);
    }
    if let Some(path) = &args.out {
        emit(Some(path), &to_canonical_json(&report))?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Checks("verification failed".into()))
    }
}

fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: impl Iterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn ratio_rows(points: &[RatioPoint]) -> impl Iterator<Item = impl Serialize + '_> {
    points.iter().map(|p| {
        (
            &p.alpha,
            &p.r,
            p.runs,
            p.skipped,
            p.mean_tau,
            p.dummy_rate,
            p.ratio.mean,
            p.ratio.stderr,
            p.ratio.median,
            p.ratio.q10,
            p.ratio.q90,
            p.bound_raw,
            p.bound_clamped,
            p.headline_raw,
            p.headline_clamped,
        )
    })
}

const RATIO_HEADER: [&str; 15] = [
    "alpha", "r", "runs", "skipped", "mean_tau", "dummy_rate", "mean_ratio", "stderr", "median", "q10", "q90",
    "bound_raw", "bound_clamped", "headline_raw", "headline_clamped",
];

fn event_rows(points: &[EventPoint]) -> impl Iterator<Item = impl Serialize + '_> {
    points.iter().map(|p| {
        (
            &p.alpha,
            &p.r,
            p.runs,
            p.e_prime.rate,
            p.e_prime.wilson_low,
            p.e_prime.wilson_high,
            p.e.rate,
            p.e.wilson_low,
            p.e.wilson_high,
            p.bound_raw,
            p.bound_clamped,
            p.meets_bound(),
            p.consequence_failures_given_e,
            p.deterministic_failures,
        )
    })
}

const EVENT_HEADER: [&str; 14] = [
    "alpha", "r", "runs", "e_prime", "e_prime_low", "e_prime_high", "e", "e_low", "e_high", "bound_raw",
    "bound_clamped", "meets_bound", "consequence_failures_given_e", "deterministic_failures",
];

fn experiment(args: ExperimentArgs) -> Result<(), Failure> {
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let family = args.family;
    let family = move |alpha: &Ratio, seed: u64| family_config(family, alpha, seed);
    match args.kind {
        ExperimentKind::Ratio => {
            let points = competitive_ratio_experiment(&family, &args.alphas, args.seeds, args.seed, args.r.as_ref())
                .context("ratio experiment")?;
            write_csv(&args.out_dir.join("ratio.csv"), &RATIO_HEADER, ratio_rows(&points))?;
            fs::write(args.out_dir.join("ratio.json"), to_canonical_json(&points)).context("writing ratio.json")?;
            for p in &points {
                println!(
                    "alpha {} r {}: mean ratio {:.4} (se {:.4}) over {} runs, dummy rate {:.3}, bound {:.4} raw / {:.4}",
                    p.alpha, p.r, p.ratio.mean, p.ratio.stderr, p.runs, p.dummy_rate, p.bound_raw, p.bound_clamped
                );
            }
        }
        ExperimentKind::Events => {
            let points = event_frequency_experiment(&family, &args.alphas, args.seeds, args.seed, args.r.as_ref())
                .context("event experiment")?;
            write_csv(&args.out_dir.join("events.csv"), &EVENT_HEADER, event_rows(&points))?;
            fs::write(args.out_dir.join("events.json"), to_canonical_json(&points)).context("writing events.json")?;
            for p in &points {
                println!(
                    "alpha {} r {}: Pr[E'] {:.4} [{:.4}, {:.4}], Pr[E] {:.4} [{:.4}, {:.4}] vs bound {:.4}",
                    p.alpha,
                    p.r,
                    p.e_prime.rate,
                    p.e_prime.wilson_low,
                    p.e_prime.wilson_high,
                    p.e.rate,
                    p.e.wilson_low,
                    p.e.wilson_high,
                    p.bound_clamped
                );
            }
        }
    }
    Ok(())
}

fn replay_cmd(args: ReplayArgs) -> Result<(), Failure> {
    let report: RunReport = from_json(&read(&args.report)?).context("run report")?;
    let verdict = replay(&report).context("replaying")?;
    if verdict.bit_exact {
        println!("bit-exact: {}", verdict.actual_digest);
        Ok(())
    } else {
        Err(Failure::Checks(format!(
            "replay diverged: expected {}, got {}",
            verdict.expected_digest, verdict.actual_digest
        )))
    }
}

/// Runs the command line given by `argv` (program name first) and returns
/// the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Run(a) => run(a),
        Command::Verify(a) => verify(a),
        Command::Experiment(a) => experiment(a),
        Command::Replay(a) => replay_cmd(a),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Checks(msg)) => {
            eprintln!("{msg}");
            1
        }
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}
