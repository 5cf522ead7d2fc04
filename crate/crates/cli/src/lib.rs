//! `qfl` command-line interface: corpus preparation, language-model
//! pretraining, two-stage training, retrieval evaluation, report generation
//! and hallucination scoring.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use qfl_core::corpus::Variant;
use qfl_core::trainer::Strategy;

pub use commands::Run;
pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("missing prerequisite: {0}")]
    Missing(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] qfl_core::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    /// 1 for usage and configuration problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Missing(_) | CliError::Core(qfl_core::Error::Config(_)) => 1,
            CliError::Io { .. } | CliError::Core(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "qfl", version, about = "Q-Former training and evaluation on a synthetic pathology corpus")]
pub struct Cli {
    /// TOML config file; built-in defaults are used for anything it omits.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set stage1.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Run directory; defaults to the newest `runs/<timestamp>-<hash8>` for
    /// this config, or a new one.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the corpus, the patient-level split and the vocabulary.
    Prepare {
        #[arg(long)]
        force: bool,
    },
    /// Next-token pretraining of the stub language model on report text.
    PretrainLm,
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long, value_parser = parse_variant)]
        variant: Variant,
    },
    /// Cross-variant retrieval tables from the two stage-1 checkpoints.
    Evaluate,
    /// Decode a report for one case with a stage-2 model.
    Generate {
        #[arg(long)]
        case_id: String,
        #[arg(long, value_parser = parse_variant, default_value = "he_only")]
        variant: Variant,
        /// `greedy`, `beam` or `beam:<width>`; defaults to `eval.strategy`.
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<Strategy>,
    },
    /// Marker-token counts of reports generated for the test split.
    Hallucination,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).map_err(|e| e.to_string())
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    Strategy::parse(s).map_err(|e| e.to_string())
}

/// Runs a parsed command and returns the text to print.
pub fn execute(cli: Cli, env_seed: Option<&str>) -> Result<String, CliError> {
    let config = RunConfig::resolve(cli.config.as_deref(), &cli.set, env_seed)?;
    let run = Run::open(config, cli.run_dir)?;
    match cli.command {
        Command::Prepare { force } => commands::cmd_prepare(&run, force),
        Command::PretrainLm => commands::cmd_pretrain_lm(&run),
        Command::Train { stage, variant } => commands::cmd_train(&run, stage, variant),
        Command::Evaluate => {
            let t = commands::cmd_evaluate(&run)?;
            Ok(format!(
                "{}wrote {} and {} in {}",
                commands::format_table(&t),
                commands::RETRIEVAL_CSV,
                commands::RETRIEVAL_JSON,
                run.dir.display()
            ))
        }
        Command::Generate {
            case_id,
            variant,
            strategy,
        } => Ok(commands::cmd_generate(&run, &case_id, variant, strategy)?.text),
        Command::Hallucination => {
            let h = commands::cmd_hallucination(&run)?;
            let line = |r: &qfl_core::eval::HallucinationReport| {
                format!(
                    "{:<8} mean marker tokens {:.3} (std {:.3}), reports without markers {:.1}%",
                    r.training.to_string(),
                    r.mean,
                    r.std,
                    100.0 * r.fraction_zero
                )
            };
            Ok(format!("{}\n{}", line(&h.he_only), line(&h.full)))
        }
    }
}

/// Full entry point: parses `args`, runs, prints, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let seed = std::env::var(config::SEED_ENV).ok();
    match execute(cli, seed.as_deref()) {
        Ok(out) => {
            println!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
