use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context as _, Result};
use clap::{Parser, Subcommand};
use legible_cli::pipeline::{self, Context};
use legible_cli::{exit_code, init_logging, PipelineConfig};

#[derive(Parser, Debug)]
#[command(name = "legible", version, about = "Indoor-space legibility pipeline")]
struct Cli {
    /// TOML pipeline configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output root.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic station corpus.
    Synth,
    /// Crop panoramas, tag crops with segments, balance and split.
    Prepare,
    /// Train the classifier.
    Train {
        /// Continue from the saved checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate on the test split and write legibility tables.
    Evaluate,
    /// Similarity matrices, clustering, layout and CAM images.
    Analyze,
    /// Run the survey service until interrupted.
    Serve {
        /// Overrides the configured listen address.
        #[arg(long)]
        addr: Option<String>,
    },
    /// Score stored survey responses against model attention.
    Validate,
    /// Print the effective configuration.
    Config,
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.out {
        config.paths.out = out;
    }
    if let Command::Serve { addr: Some(addr) } = &cli.command {
        config.survey.addr = addr.clone();
    }
    let ctx = Context::new(config)?;
    log::info!("start command={:?} seed={} config_digest={}", cli.command, ctx.config.seed, ctx.digest);
    match cli.command {
        Command::Synth => drop(pipeline::cmd_synth(&ctx)?),
        Command::Prepare => drop(pipeline::cmd_prepare(&ctx)?),
        Command::Train { resume } => drop(pipeline::cmd_train(&ctx, resume)?),
        Command::Evaluate => drop(pipeline::cmd_evaluate(&ctx)?),
        Command::Analyze => drop(pipeline::cmd_analyze(&ctx)?),
        Command::Validate => drop(pipeline::cmd_validate(&ctx)?),
        Command::Config => print!("{}", ctx.config.to_toml()),
        Command::Serve { .. } => {
            let state = pipeline::survey_state(&ctx)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(&ctx.config.survey.addr)
                    .await
                    .with_context(|| format!("cannot bind {}", ctx.config.survey.addr))?;
                legible_survey::serve(listener, state, async {
                    let _ = tokio::signal::ctrl_c().await;
                    log::info!("shutdown signal=interrupt");
                })
                .await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            log::error!("failed exit_code={code} error=\"{e:#}\"");
            ExitCode::from(code as u8)
        }
    }
}
