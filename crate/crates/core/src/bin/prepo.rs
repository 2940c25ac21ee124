use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use prepo::cli::{self, golden, BudgetAxis, ExitStatus, Overrides};
use prepo::PrepoError;

#[derive(Parser)]
#[command(name = "prepo", version, about = "Perplexity-scheduled prompt selection with entropy-weighted rollouts")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Override the training seed from the spec.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Disable data-parallel scoring, rollouts and loss.
    #[arg(long, global = true)]
    sequential: bool,
    /// Output directory (runs root for `train`, report directory otherwise).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy from an experiment spec.
    Train { spec: PathBuf },
    /// Evaluate a checkpoint on the spec's dataset.
    Eval {
        spec: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Align several runs on a shared budget axis.
    Compare {
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "mean_reward")]
        metric: String,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value = "rollouts")]
        axis: String,
    },
    /// Correlate prompt perplexity with per-prompt passrate.
    AnalyzePpl {
        spec: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        k: usize,
    },
    /// Export the generated dataset as a text file.
    Dataset { spec: PathBuf },
    /// Regenerate the golden rollout fixture.
    Golden {
        #[arg(long)]
        force: bool,
    },
}

fn overrides(g: &Global, out: bool) -> Overrides {
    Overrides {
        seed: g.seed,
        sequential: g.sequential,
        out: if out { g.out.clone() } else { None },
    }
}

fn run(cli: Cli) -> Result<(), PrepoError> {
    let g = &cli.global;
    match cli.command {
        Command::Train { spec } => {
            let outcome = cli::cmd_train(&spec, &overrides(g, true))?;
            println!("{}", outcome.run_dir.display());
        }
        Command::Eval { spec, checkpoint } => {
            let report = cli::cmd_eval(&spec, &checkpoint, &overrides(g, false))?;
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(dir) = &g.out {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("eval.json"), &text)?;
            }
            println!("{text}");
        }
        Command::Compare { runs, metric, threshold, axis } => {
            let axis: BudgetAxis = axis.parse()?;
            print!("{}", cli::cmd_compare(&runs, &metric, axis, threshold, g.out.as_deref())?);
        }
        Command::AnalyzePpl { spec, checkpoint, k } => {
            let out = g.out.clone().unwrap_or_else(|| PathBuf::from("ppl_analysis"));
            let report = cli::cmd_analyze_ppl(&spec, &checkpoint, k, &out, &overrides(g, false))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Dataset { spec } => {
            let out = g.out.clone().unwrap_or_else(|| PathBuf::from("dataset.txt"));
            let n = cli::cmd_dataset(&spec, &out, &overrides(g, false))?;
            eprintln!("wrote {n} prompts to {}", out.display());
        }
        Command::Golden { force } => {
            let path = g
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/golden_rollouts.json")));
            let fixture = golden::write(&path, force)?;
            eprintln!("wrote {} rollouts to {}", fixture.rollouts.len(), path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(ExitStatus::Parse as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(ExitStatus::from(&e) as u8)
        }
    }
}
