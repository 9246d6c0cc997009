use clap::{Parser, Subcommand};
use fgcl_cli::commands;
use fgcl_cli::config::{Protocol, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

/// Dyadic functional-connectivity pipeline.
///
/// Commands form a chain; each reads the previous command's artifacts from
/// the shared output root. Run them in order: synth, graphs, pretrain,
/// embed, classify, eval. `attraction` can run any time after `graphs`.
#[derive(Debug, Parser)]
#[command(name = "fgcl", version, about)]
struct Cli {
    /// Path to the run configuration (TOML). Missing file means defaults.
    #[arg(long, global = true, default_value = "fgcl.toml")]
    config: PathBuf,

    /// Override the artifact root from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override the run seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dyadic dataset and its manifest.
    Synth,
    /// Build per-trial graph views and the split-annotated index.
    Graphs,
    /// Contrastively pretrain the graph encoder.
    Pretrain,
    /// Embed all trials with the pretrained encoder.
    Embed,
    /// Train the population classifier and write per-trial predictions.
    Classify,
    /// Score predictions (or run leave-dyad-out cross-validation).
    Eval {
        /// Evaluation protocol; defaults to the config's choice.
        #[arg(long, value_enum)]
        protocol: Option<Protocol>,
    },
    /// Positive/negative pair similarity report on held-out trials.
    Attraction,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = if cli.config.exists() {
        RunConfig::load(&cli.config)?
    } else {
        log::info!(
            "config {} not found, using defaults",
            cli.config.display()
        );
        RunConfig::default()
    };
    if let Some(out) = cli.out {
        cfg.io.root = out;
    }
    if let Some(seed) = cli.seed {
        cfg.rng_seed = seed;
    }
    cfg.validate()?;
    match cli.command {
        Command::Synth => commands::cmd_synth(&cfg),
        Command::Graphs => commands::cmd_graphs(&cfg),
        Command::Pretrain => commands::cmd_pretrain(&cfg),
        Command::Embed => commands::cmd_embed(&cfg),
        Command::Classify => commands::cmd_classify(&cfg),
        Command::Eval { protocol } => commands::cmd_eval(&cfg, protocol),
        Command::Attraction => commands::cmd_attraction(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("FGCL_LOG_LEVEL", "info"),
    )
    .format_timestamp(None)
    .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
