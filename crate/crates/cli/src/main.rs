use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rats_core::config::RunConfig;
use rats_core::experiment::{cmd_ablate, cmd_eval, cmd_pretrain, cmd_rats};
use rats_core::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "rats", version, about = "Reward-aware trajectory shaping on toy flow-matching tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed (the eval seed for `eval`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Flow-matching pretraining of the backbone.
    Pretrain(Common),
    /// Train the student adapter against the reward with teacher shaping.
    Rats(Common),
    /// Run the config's [ablate] grid over shared seeds.
    Ablate(Common),
    /// Evaluate the backbone or a trained adapter.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Adapter checkpoint; omit to evaluate the backbone alone.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated step counts; defaults to eval.steps.
        #[arg(long, value_delimiter = ',')]
        steps: Vec<usize>,
    },
}

fn load(common: &Common, eval: bool) -> Result<(RunConfig, PathBuf), Error> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        if eval {
            cfg.eval.seed = seed;
        } else {
            cfg.seed = seed;
        }
    }
    let base = common
        .config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    Ok((cfg, base))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Pretrain(c) => {
            let (cfg, _) = load(&c, false)?;
            let path = cmd_pretrain(&cfg, &c.out)?;
            println!("backbone written to {}", path.display());
        }
        Command::Rats(c) => {
            let (cfg, base) = load(&c, false)?;
            let run = cmd_rats(&cfg, &base, &c.out)?;
            let s = &run.summary;
            println!(
                "{} iterations, final smoothed R_S {:.6}, R_T {:.6}, gate {:.4}",
                s.iterations_completed,
                s.final_smoothed_student.unwrap_or(f64::NAN),
                s.final_smoothed_teacher.unwrap_or(f64::NAN),
                s.final_gate.unwrap_or(f64::NAN)
            );
        }
        Command::Ablate(c) => {
            let (cfg, base) = load(&c, false)?;
            let table = cmd_ablate(&cfg, &base, &c.out)?;
            print!("{}", table.to_csv());
        }
        Command::Eval {
            common,
            checkpoint,
            steps,
        } => {
            let (cfg, base) = load(&common, true)?;
            let steps = if steps.is_empty() { cfg.eval.steps.clone() } else { steps };
            let report = cmd_eval(&cfg, &base, checkpoint.as_deref(), &steps, &common.out)?;
            for r in &report.results {
                println!(
                    "steps {:>3}: mean reward {:.6}, mode accuracy {:.4}",
                    r.steps, r.mean_reward, r.mode_accuracy
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                ExitCode::from(EXIT_NUMERIC)
            } else {
                ExitCode::from(EXIT_USAGE)
            }
        }
    }
}
