use std::path::PathBuf;
use std::process::ExitCode;

use advdef_core::attacks::AttackKind;
use advdef_core::config::ExperimentConfig;
use advdef_core::defense::{DeploymentPattern, Variant};
use advdef_core::experiment::{self, grid};
use advdef_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Train, attack and evaluate siamese trackers with learned input defenses.
///
/// Exit codes: 0 success, 2 configuration or usage error, 3 runtime failure.
#[derive(Parser)]
#[command(name = "advdef", version)]
struct Cli {
    /// More log output (repeat for debug level).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file (TOML).
    #[arg(short, long)]
    config: PathBuf,

    /// Overrides the experiment seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Overrides the output directory (and DUALOSSDEF_OUT).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BranchArg {
    Template,
    Search,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PatternArg {
    None,
    Template,
    Search,
    Both,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AttackArg {
    None,
    Fgsm,
    Pgd,
    Iou,
}

#[derive(Subcommand)]
enum Command {
    /// Train the baseline tracker on clean pairs.
    TrainTracker(Common),
    /// Adversarially train the defense for one branch against the frozen tracker.
    TrainDefense {
        #[command(flatten)]
        common: Common,
        /// Input branch the defense protects.
        #[arg(long, value_enum)]
        branch: BranchArg,
    },
    /// Evaluate a grid of defense patterns and attacks; writes metrics.csv/json.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defense deployment pattern(s), comma separated.
        #[arg(long, value_enum, value_delimiter = ',', default_value = "none")]
        pattern: Vec<PatternArg>,
        /// Attack(s), comma separated.
        #[arg(long, value_enum, value_delimiter = ',', default_value = "none")]
        attack: Vec<AttackArg>,
        /// Attack through the deployed defense (requires a pattern).
        #[arg(long)]
        adaptive: bool,
        /// Sequences evaluated concurrently.
        #[arg(long)]
        jobs: Option<usize>,
        /// Also write success and precision plots.
        #[arg(long)]
        plots: bool,
    },
    /// Merge evaluation directories into one comparison table (first is the baseline).
    Report {
        /// Evaluation directories written by `eval`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Where report.csv and report.json go.
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Print the default configuration as TOML.
    DefaultConfig,
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    cfg.apply_env();
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.output {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::TrainTracker(common) => {
            let cfg = load(&common)?;
            let run = experiment::cmd_train_tracker(&cfg)?;
            let last = run.log.last().map_or(f64::NAN, |r| r.loss);
            println!("tracker checkpoint: {} (final batch loss {last:.4})", run.checkpoint.display());
        }
        Command::TrainDefense { common, branch } => {
            let cfg = load(&common)?;
            let branch = match branch {
                BranchArg::Template => Variant::Template,
                BranchArg::Search => Variant::Search,
            };
            let run = experiment::cmd_train_defense(&cfg, branch)?;
            let means = run.log.epoch_means();
            println!(
                "{branch} defense checkpoint: {} (final epoch loss {:.4}, max |delta| {:.5})",
                run.checkpoint.display(),
                means.last().copied().unwrap_or(f64::NAN),
                run.log.max_delta
            );
        }
        Command::Eval {
            common,
            pattern,
            attack,
            adaptive,
            jobs,
            plots,
        } => {
            let mut cfg = load(&common)?;
            if let Some(j) = jobs {
                cfg.evaluation.jobs = j;
            }
            cfg.evaluation.plots |= plots;
            let patterns: Vec<Option<DeploymentPattern>> = pattern
                .iter()
                .map(|p| match p {
                    PatternArg::None => None,
                    PatternArg::Template => Some(DeploymentPattern::TemplateOnly),
                    PatternArg::Search => Some(DeploymentPattern::SearchOnly),
                    PatternArg::Both => Some(DeploymentPattern::Both),
                })
                .collect();
            let attacks: Vec<Option<AttackKind>> = attack
                .iter()
                .map(|a| match a {
                    AttackArg::None => None,
                    AttackArg::Fgsm => Some(AttackKind::Fgsm),
                    AttackArg::Pgd => Some(AttackKind::Pgd),
                    AttackArg::Iou => Some(AttackKind::IouBlackbox),
                })
                .collect();
            if adaptive && attacks.iter().all(Option::is_none) {
                return Err(Error::Config("--adaptive needs an attack".into()));
            }
            let cells = grid(&patterns, &attacks, adaptive)?;
            let run = experiment::cmd_eval(&cfg, &cells)?;
            print!("{}", run.table);
            println!("reports: {}", run.dir.display());
        }
        Command::Report { runs, out } => {
            let (_, text) = experiment::cmd_report(&runs, &out)?;
            print!("{text}");
            println!("merged report: {}", out.display());
        }
        Command::DefaultConfig => {
            print!("{}", ExperimentConfig::default().to_toml()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
