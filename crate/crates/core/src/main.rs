use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use stochreid::cli::{cmd_ablate, cmd_eval, cmd_gen, cmd_train, Overrides};
use stochreid::distance::DistanceMode;
use stochreid::{Error, Result};

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Command {
    /// Generate a synthetic dataset
    Gen,
    /// Train an encoder on a dataset
    Train,
    /// Score a checkpoint on a dataset's query/gallery splits
    Eval,
    /// Run an ablation grid
    Ablate,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Mode {
    Direct,
    Softmax,
}

/// Clustering-based unsupervised re-identification with stochastic cluster memory.
#[derive(Debug, Parser)]
#[command(name = "stochreid", version)]
struct Args {
    command: Command,
    /// JSON run config
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (features.csv, labels.csv)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the clustering distance mode
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Checkpoint manifest for `eval`
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn required(value: &Option<PathBuf>, flag: &str, command: &str) -> Result<PathBuf> {
    value
        .clone()
        .ok_or_else(|| Error::InvalidConfig(format!("`{command}` requires --{flag}")))
}

fn run(args: &Args) -> Result<()> {
    let overrides = Overrides {
        seed: args.seed,
        mode: args.mode.map(|m| match m {
            Mode::Direct => DistanceMode::Direct,
            Mode::Softmax => DistanceMode::SoftmaxRelative,
        }),
    };
    match args.command {
        Command::Gen => {
            let config = required(&args.config, "config", "gen")?;
            let out = required(&args.out, "out", "gen")?;
            let ds = cmd_gen(&config, &out, &overrides)?;
            eprintln!("wrote {} instances to {}", ds.len(), out.display());
        }
        Command::Train => {
            let config = required(&args.config, "config", "train")?;
            let data = required(&args.data, "data", "train")?;
            let out = required(&args.out, "out", "train")?;
            let summary = cmd_train(&config, &data, &out, &overrides)?;
            if let Some(r) = &summary.retrieval {
                eprintln!("mAP {:.4}  rank-1 {:.4}", r.map, r.cmc.first().copied().unwrap_or(0.0));
            }
        }
        Command::Eval => {
            let checkpoint = required(&args.checkpoint, "checkpoint", "eval")?;
            let data = required(&args.data, "data", "eval")?;
            let results = cmd_eval(&checkpoint, &data)?;
            let text = serde_json::to_string_pretty(&results).map_err(|e| Error::Invariant(e.to_string()))?;
            println!("{text}");
        }
        Command::Ablate => {
            let config = required(&args.config, "config", "ablate")?;
            let out = required(&args.out, "out", "ablate")?;
            let rows = cmd_ablate(&config, args.data.as_deref(), &out, &overrides)?;
            eprintln!("wrote {} ablation rows to {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
