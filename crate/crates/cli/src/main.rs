//! `eegreptile`: generate synthetic data, run the experiment stages, print reports.
//!
//! Exit codes: 0 success, 1 internal error, 2 bad flags or configuration,
//! 3 I/O failure, 4 missing artifact from an earlier stage, 5 incomplete report.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use reptile_core::eval::{aggregate, EvalReport, ProtocolConfig, ReportStatus, REPORT_JSON};
use reptile_core::fsio;
use reptile_core::hyperopt::{default_finetune_space, default_meta_space};
use reptile_core::pipeline::{Run, RunConfig, RunLock, Stage};
use reptile_core::taskgen::{make_family, FamilyConfig, OutlierPolicy};
use reptile_core::Error;

const RUNDIR_ENV: &str = "EEGREPTILE_RUNDIR";
const SUMMARY_CSV: &str = "report_summary.csv";

#[derive(Parser)]
#[command(name = "eegreptile", version, about = "Reptile meta-learning experiments on multi-subject epoch data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    LabelPermuted,
    FreqShifted,
    Alternate,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    TuneMeta,
    Meta,
    Baseline,
    TuneFt,
    Eval,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic subject family as a dataset directory.
    Generate {
        #[arg(long, env = RUNDIR_ENV)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        subjects: usize,
        #[arg(long, default_value_t = 2)]
        outliers: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 256)]
        times: usize,
        #[arg(long, default_value_t = 250.0)]
        sample_rate: f64,
        #[arg(long, default_value_t = 60)]
        epochs_per_class: usize,
        /// Maximum rotation (radians) between a subject's mixing and the base mixing.
        #[arg(long)]
        angle_spread: Option<f64>,
        #[arg(long)]
        noise_std: Option<f64>,
        #[arg(long, value_enum, default_value = "label-permuted")]
        outlier_policy: Policy,
    },
    /// Print a run configuration with default settings.
    Config {
        /// Dataset manifest or directory the configuration should point at.
        #[arg(long)]
        dataset: PathBuf,
        /// Include hyperparameter searches.
        #[arg(long)]
        tune: bool,
    },
    /// Run one stage (or all stages) of the experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        /// Run directory; overrides the configuration and $EEGREPTILE_RUNDIR.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Summarise report.json of a run directory.
    Report {
        #[arg(long, env = RUNDIR_ENV)]
        run: PathBuf,
        /// Two methods `A,B`; adds rows for the difference B - A.
        #[arg(long, value_parser = parse_pair, value_name = "A,B")]
        diff: Option<(String, String)>,
    },
}

fn parse_pair(s: &str) -> Result<(String, String), String> {
    match s.split_once(',') {
        Some((a, b)) if !a.is_empty() && !b.is_empty() && !b.contains(',') => Ok((a.to_string(), b.to_string())),
        _ => Err(format!("expected two method names `A,B`, got `{s}`")),
    }
}

enum Failure {
    Core(Error),
    Usage(String),
    Incomplete,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format { .. } | Error::Locked(_) | Error::Json(_) => 3,
        Error::MissingStage(_) => 4,
        Error::BadConfig(_)
        | Error::EmptySpace
        | Error::InvalidBand { .. }
        | Error::NyquistViolation { .. }
        | Error::InvalidFactor(_)
        | Error::NonIntegerFactor { .. }
        | Error::UnknownChannel(_)
        | Error::DuplicateChannel(_)
        | Error::GroupMissing(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Incomplete) => {
            eprintln!("error: report is INCOMPLETE; see its `failures` list");
            ExitCode::from(5)
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Generate {
            out,
            subjects,
            outliers,
            classes,
            seed,
            channels,
            times,
            sample_rate,
            epochs_per_class,
            angle_spread,
            noise_std,
            outlier_policy,
        } => {
            let defaults = FamilyConfig::default();
            let cfg = FamilyConfig {
                n_subjects: subjects,
                n_outliers: outliers,
                n_classes: classes,
                seed,
                channels,
                times,
                sample_rate_hz: sample_rate,
                epochs_per_class,
                angle_spread: angle_spread.unwrap_or(defaults.angle_spread),
                noise_std: noise_std.unwrap_or(defaults.noise_std),
                outlier_policy: match outlier_policy {
                    Policy::LabelPermuted => OutlierPolicy::LabelPermuted,
                    Policy::FreqShifted => OutlierPolicy::FreqShifted,
                    Policy::Alternate => OutlierPolicy::Alternate,
                },
                ..defaults
            };
            let family = make_family(&cfg)?;
            let manifest = family.save(&out, "synthetic")?;
            println!("wrote {} subjects to {}", manifest.subjects.len(), out.display());
            Ok(())
        }
        Command::Config { dataset, tune } => {
            let mut protocol = ProtocolConfig::default();
            if tune {
                protocol.meta_space = Some(default_meta_space(false));
                protocol.meta_trials = 6;
                protocol.finetune_space = Some(default_finetune_space());
                protocol.finetune_trials = 10;
            }
            let cfg = RunConfig { dataset, run_dir: None, model: None, protocol };
            println!("{}", serde_json::to_string_pretty(&cfg).map_err(Error::from)?);
            Ok(())
        }
        Command::Run { config, stage, run_dir } => {
            let cfg = RunConfig::load(&config)?;
            let dir = run_dir
                .or_else(|| cfg.run_dir.clone())
                .or_else(|| std::env::var_os(RUNDIR_ENV).map(PathBuf::from))
                .ok_or_else(|| Failure::Usage(format!("no run directory: set run_dir, --run-dir or ${RUNDIR_ENV}")))?;
            let _lock = RunLock::acquire(&dir)?;
            let run = Run::open(cfg, &dir)?;
            let stage = match stage {
                StageArg::TuneMeta => Stage::TuneMeta,
                StageArg::Meta => Stage::Meta,
                StageArg::Baseline => Stage::Baseline,
                StageArg::TuneFt => Stage::TuneFt,
                StageArg::Eval => Stage::Eval,
                StageArg::All => Stage::All,
            };
            match run.run_stage(stage)? {
                Some(report) => {
                    println!("{}", render(&report, Some(("baseline", "meta")))?.0);
                    if report.status == ReportStatus::Incomplete {
                        return Err(Failure::Incomplete);
                    }
                }
                None => println!("stage finished; artifacts in {}", dir.display()),
            }
            Ok(())
        }
        Command::Report { run, diff } => {
            let path = run.join(REPORT_JSON);
            if !path.exists() {
                return Err(Error::MissingStage(format!("{} (run stage `eval` first)", path.display())).into());
            }
            let report = EvalReport::load(&path)?;
            let pair = diff.as_ref().map(|(a, b)| (a.as_str(), b.as_str()));
            let (table, csv) = render(&report, pair)?;
            println!("{table}");
            fsio::write_atomic(&run.join(SUMMARY_CSV), csv.as_bytes())?;
            Ok(())
        }
    }
}

/// Human table and machine CSV, both recomputed from the report's cells.
fn render(report: &EvalReport, diff: Option<(&str, &str)>) -> Result<(String, String), Error> {
    let methods = report.methods();
    let pair = diff.filter(|(a, b)| methods.iter().any(|m| m == a) && methods.iter().any(|m| m == b));
    // Tests are stored as `first - second`; the difference rows show `B - A`.
    let (aggregates, tests) = aggregate(&report.cells, pair.map(|(a, b)| (b, a)));
    let mut table = String::new();
    let mut csv = String::from("kind,method,subset_size,n,mean,ci_half_width,w,p\n");
    let _ = writeln!(table, "{:<10} {:>5} {:>4} {:>8} {:>9}", "method", "size", "n", "mean", "95% CI");
    for a in &aggregates {
        let hw = a.ci_half_width.map(|h| format!("{h:.4}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(table, "{:<10} {:>5} {:>4} {:>8.4} {:>9}", a.method, a.subset_size, a.n, a.mean, hw);
        let _ = writeln!(
            csv,
            "mean,{},{},{},{},{},,",
            a.method,
            a.subset_size,
            a.n,
            a.mean,
            a.ci_half_width.map(|h| h.to_string()).unwrap_or_default()
        );
    }
    if let Some((a, b)) = pair {
        let _ = writeln!(table, "\ndifference {b} - {a}");
        let _ = writeln!(table, "{:>5} {:>4} {:>9} {:>9} {:>8} {:>10}", "size", "n", "mean", "95% CI", "W", "p");
        for t in &tests {
            let fmt = |v: Option<f64>, p: usize| v.map(|x| format!("{x:.p$}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                table,
                "{:>5} {:>4} {:>+9.4} {:>9} {:>8} {:>10}",
                t.subset_size,
                t.n_pairs,
                t.mean_difference,
                fmt(t.ci_half_width, 4),
                fmt(t.w, 1),
                fmt(t.p, 6)
            );
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(
                csv,
                "difference,{b}-{a},{},{},{},{},{},{}",
                t.subset_size,
                t.n_pairs,
                t.mean_difference,
                opt(t.ci_half_width),
                opt(t.w),
                opt(t.p)
            );
        }
    } else if let Some((a, b)) = diff {
        let _ = writeln!(table, "\nno difference rows: report lacks `{a}` or `{b}`");
    }
    if report.status == ReportStatus::Incomplete {
        let _ = writeln!(table, "\nINCOMPLETE: {} failed cells or folds", report.failures.len());
    }
    Ok((table, csv))
}
