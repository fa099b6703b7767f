use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use peervoip_bench::{run, Scenario};

#[derive(Debug, Parser)]
#[command(name = "peervoip-bench", version, about = "Reproduces the voice, file, stress and chat measurements on loopback")]
struct Cli {
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run scenarios and print a summary table.
    Run {
        #[arg(long, default_value = "all", value_parser = ["voice", "file", "stress", "chat", "all"])]
        scenario: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Also write the machine-readable report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let level: tracing::Level = cli.log_level.parse().unwrap_or(tracing::Level::WARN);
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();

    let Command::Run { scenario, seed, report } = cli.command;
    let scenario: Scenario = scenario.parse().map_err(anyhow::Error::msg)?;
    let rep = run(scenario, seed).await?;
    print!("{}", rep.render_table()?);
    if let Some(path) = report {
        std::fs::write(&path, rep.to_json()?).with_context(|| format!("writing {}", path.display()))?;
        eprintln!("report written to {}", path.display());
    }
    if !rep.passed() {
        std::process::exit(1);
    }
    Ok(())
}
