use std::path::PathBuf;
use std::process::ExitCode;

use ad_audit::config::{BackendKind, Config};
use ad_audit::pipeline::{Pipeline, Stage};
use anyhow::Context;
use clap::{Parser, Subcommand};

/// Ad-delivery audit pipeline.
#[derive(Debug, Parser)]
#[command(name = "ad-audit", version)]
struct Cli {
    /// Config file (TOML). Relative paths inside it resolve against its directory.
    #[arg(long, short, global = true, default_value = "ad-audit.toml")]
    config: PathBuf,
    /// Override the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for stage-internal parallelism.
    #[arg(long, short, global = true, default_value_t = default_jobs())]
    jobs: usize,
    /// Print the plan and exit without writing anything.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Use the deterministic mock backend whatever the config says.
    #[arg(long, global = true)]
    mock_backend: bool,
    /// Override the output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse impressions, pick the session gap and filter sessions.
    Sessionize,
    /// Extract per-ad features with the language model.
    Features,
    /// Build user-week exposure cells and the descriptive report.
    Audit,
    /// Fit negative binomial regressions per target category.
    Nbr,
    /// Predict demographics from sessions and per-user summaries.
    Reconstruct,
    /// Score predictions against ground truth and baselines.
    Evaluate,
    /// Run every stage in order.
    All,
    /// Print the resolved config as TOML.
    ShowConfig,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn stages(cmd: &Command) -> Vec<Stage> {
    match cmd {
        Command::Sessionize => vec![Stage::Sessionize],
        Command::Features => vec![Stage::Features],
        Command::Audit => vec![Stage::Audit],
        Command::Nbr => vec![Stage::Nbr],
        Command::Reconstruct => vec![Stage::Reconstruct],
        Command::Evaluate => vec![Stage::Evaluate],
        Command::All => Stage::ALL.to_vec(),
        Command::ShowConfig => vec![],
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = if cli.config.exists() {
        Config::load(&cli.config).with_context(|| format!("loading {}", cli.config.display()))?
    } else {
        anyhow::bail!("config file {} not found", cli.config.display());
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if cli.mock_backend {
        config.backend.kind = BackendKind::Mock;
    }
    if let Some(dir) = cli.output_dir {
        config.output_dir = dir;
    }
    if let Command::ShowConfig = cli.command {
        print!("{}", config.to_toml()?);
        return Ok(());
    }
    let stages = stages(&cli.command);
    let pipeline = Pipeline::new(config, cli.jobs);
    if cli.dry_run {
        print!("{}", pipeline.plan(&stages));
        return Ok(());
    }
    pipeline.run(&stages)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
