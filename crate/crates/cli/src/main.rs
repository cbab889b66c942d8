use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use skelflow_cli::{run, Command, RunConfig};

#[derive(Parser)]
#[command(name = "skelflow", version, about = "Skeleton-guided attention over colorized scene flow")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Root seed every random stream derives from.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Generate the synthetic benchmark (manifest, skeletons, flow).
    GenData,
    /// Train the two-branch skeleton network.
    TrainSkeleton,
    /// Train the flow network; `flow.attention` picks none, at1 or at2.
    TrainFlow,
    /// Train the late-fused network under `fusion.policy`.
    TrainFused,
    /// Write per-sample joint scores from a trained skeleton network.
    ExtractScores,
    /// Write the attention masks of one sample as PGM frames.
    RenderMasks,
    /// Accuracy and confusion counts of a checkpoint or predictions file.
    Eval,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::GenData => Command::GenData,
            Cmd::TrainSkeleton => Command::TrainSkeleton,
            Cmd::TrainFlow => Command::TrainFlow,
            Cmd::TrainFused => Command::TrainFused,
            Cmd::ExtractScores => Command::ExtractScores,
            Cmd::RenderMasks => Command::RenderMasks,
            Cmd::Eval => Command::Eval,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = (|| {
        let text = match &cli.config {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        let cfg = RunConfig::from_parts(&text, &cli.set)?;
        let cmd = Command::from(cli.command);
        let outcome = run(cmd, &cfg, &cli.out, cli.seed)?;
        if let Some(e) = outcome.evaluation {
            println!("{}: test accuracy {:.4}", cmd.name(), e.accuracy);
        }
        anyhow::Ok(())
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("skelflow: {e:#}");
            ExitCode::FAILURE
        }
    }
}
