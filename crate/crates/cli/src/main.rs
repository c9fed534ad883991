use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use flowvi::flows::FlowKind;
use flowvi::harness::{self, RunConfig, Split};
use flowvi::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Flow-based variational summarizer: training, evaluation and diagnostics.
#[derive(Parser)]
#[command(name = "flowvi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML config and write a run directory.
    Train { config: PathBuf },
    /// Decode a JSONL corpus with a finished run and print the scores as JSON.
    Evaluate {
        run_dir: PathBuf,
        corpus: PathBuf,
        /// Also write the decoded summaries here, one per line.
        #[arg(long)]
        decoded: Option<PathBuf>,
    },
    /// Write the synthetic train/val/test splits described by a config.
    GenData { config: PathBuf },
    /// Export posterior draws (z0 and zK) for every document as CSV.
    SampleLatents {
        run_dir: PathBuf,
        corpus: PathBuf,
        n: usize,
        #[arg(long, default_value = "latents.csv")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of the training loss gradient on a tiny model.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
    /// List the built-in presets.
    Presets,
}

fn run(cli: Cli) -> flowvi::Result<()> {
    match cli.command {
        Command::Train { config } => {
            let s = harness::run_experiment(&config)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Evaluate {
            run_dir,
            corpus,
            decoded,
        } => {
            let (lines, report) = harness::evaluate_run(&run_dir, &corpus)?;
            if let Some(p) = decoded {
                std::fs::write(p, lines.join("\n") + "\n")?;
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::GenData { config } => {
            let cfg = RunConfig::load(&config)?;
            for p in harness::gen_data(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::SampleLatents {
            run_dir,
            corpus,
            n,
            out,
            seed,
        } => {
            let run = harness::load_run(&run_dir)?;
            let c = harness::load_corpus(&[&corpus], Split::Test)?;
            let examples = c.encode(&run.vocab, run.config.max_source_tokens, run.config.max_target_tokens)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = harness::dump_latents(&run.model, &examples, n, &out, &mut rng)?;
            println!("wrote {rows} rows to {}", out.display());
        }
        Command::GradCheck { seed, tol } => {
            let mut worst: f64 = 0.0;
            for kind in FlowKind::INVERTIBLE {
                let start = Instant::now();
                let r = harness::total_loss_grad_check(kind, seed)?;
                println!(
                    "{:<8} coords {:>5}  max rel err {:.2e}  kinks {}  ({:.1}s)",
                    kind.to_string(),
                    r.analytic.len(),
                    r.max_rel_error,
                    r.flagged.len(),
                    start.elapsed().as_secs_f64()
                );
                worst = worst.max(r.max_rel_error);
            }
            if worst > tol {
                return Err(Error::Contract(format!("gradient error {worst:.2e} exceeds {tol:.0e}")));
            }
        }
        Command::Presets => {
            for name in harness::preset_names() {
                println!("{name}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
