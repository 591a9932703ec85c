mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use chrono::{DateTime, SubsecRound, Utc};
use clap::{Parser, Subcommand};
use dqa_core::{DqaError, Result};

use commands::Ctx;
use config::ProjectConfig;

#[derive(Debug, Parser)]
#[command(name = "dqa", version, about = "Data-quality assurance workflow for clinical cohorts")]
struct Cli {
    /// Project config (TOML, or JSON by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root; artifacts go under `<out>/<project_name>/`.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Fixed clock (RFC 3339) for reproducible artifacts.
    #[arg(long, global = true)]
    now: Option<String>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Read observation CSVs into the record store.
    Ingest,
    /// Curate per-source metadata tables.
    Metadata,
    /// Map source identifiers onto data elements.
    Group,
    /// Apply transformation rules.
    Transform,
    /// Run data-quality checks.
    Check,
    /// Render the per-category reports.
    Report,
    /// Emit or apply the adjudication form.
    #[command(subcommand)]
    Adjudicate(Adjudicate),
    /// Write the impact summary.
    Summarize,
    /// Generate a synthetic cohort with a flaw ledger.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// ingest, group, transform, check and report in sequence.
    Pipeline,
}

#[derive(Debug, Subcommand)]
enum Adjudicate {
    Emit {
        #[arg(long)]
        form: Option<PathBuf>,
    },
    Apply {
        #[arg(long)]
        form: PathBuf,
    },
}

fn parse_now(s: Option<&str>) -> Result<DateTime<Utc>> {
    match s {
        Some(s) => DateTime::parse_from_rfc3339(s)
            .map(|t| t.with_timezone(&Utc))
            .map_err(|e| DqaError::Invalid(format!("--now `{s}`: {e}"))),
        None => Ok(Utc::now().trunc_subsecs(0)),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(DqaError::Invalid("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| DqaError::Invalid(format!("thread pool: {e}")))?;
    }
    let config = cli
        .config
        .as_deref()
        .ok_or_else(|| DqaError::Invalid("--config is required".into()))?;
    let ctx = Ctx {
        cfg: ProjectConfig::load(config)?,
        out: cli.out,
        now: parse_now(cli.now.as_deref())?,
        seed: cli.seed,
    };
    match cli.command {
        Command::Ingest => commands::ingest(&ctx),
        Command::Metadata => commands::metadata(&ctx),
        Command::Group => commands::group(&ctx),
        Command::Transform => commands::transform(&ctx),
        Command::Check => commands::check(&ctx),
        Command::Report => commands::report(&ctx),
        Command::Adjudicate(Adjudicate::Emit { form }) => commands::adjudicate_emit(&ctx, form),
        Command::Adjudicate(Adjudicate::Apply { form }) => commands::adjudicate_apply(&ctx, &form),
        Command::Summarize => commands::summarize(&ctx),
        Command::Synth { spec } => commands::synth(&ctx, spec),
        Command::Pipeline => commands::pipeline(&ctx),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .init();

    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            tracing::error!("{e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
