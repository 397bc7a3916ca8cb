use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use pfedgm_core::experiment::{run_experiment, ExperimentConfig};
use pfedgm_core::fedsim::Method;
use pfedgm_core::selftest;

/// Federated training with Gaussian generative personalization.
#[derive(Parser)]
#[command(name = "pfedgm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment end to end and write its artifacts.
    Run {
        /// Experiment config (JSON); the bundled desk scenario if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// pfedgm, fedavg, fedavgft or local.
        #[arg(long)]
        method: Option<Method>,
        /// Master seed; also reseeds data sampling.
        #[arg(long)]
        seed: Option<u64>,
        /// Output root; the run goes to `<out>/<method>-<seed>/`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Write the default desk-scale experiment config.
    GenScenario {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Destination file; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in numerical oracle checks.
    Selftest,
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("PFEDGM_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("PFEDGM_THREADS must be an integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    init_threads()?;
    match cli.command {
        Command::Run {
            config,
            method,
            seed,
            out,
            rounds,
        } => {
            let mut cfg = match config {
                Some(p) => ExperimentConfig::from_path(&p)
                    .with_context(|| format!("loading {}", p.display()))?,
                None => ExperimentConfig::desk_default(0),
            };
            if let Some(m) = method {
                cfg.train.method = m;
            }
            if let Some(s) = seed {
                cfg.set_seed(s);
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            if let Some(r) = rounds {
                cfg.train.rounds = r;
            }
            let s = run_experiment(&cfg)?;
            println!(
                "{} mean {:.4} std {:.4} over {} clients -> {}",
                s.run_id,
                s.mean,
                s.std,
                s.per_client.len(),
                s.output_dir.display()
            );
            if let (Some(g), Some(f)) = (s.global_mean, s.fusion_mean) {
                println!("  global {g:.4}  fusion {f:.4}  personalized {:.4}", s.mean);
            }
        }
        Command::GenScenario { seed, out } => {
            let text = serde_json::to_string_pretty(&ExperimentConfig::desk_default(seed))?;
            match out {
                Some(p) => std::fs::write(&p, text + "\n")
                    .with_context(|| format!("writing {}", p.display()))?,
                None => println!("{text}"),
            }
        }
        Command::Selftest => {
            let checks = selftest::run_all();
            let mut failed = 0;
            for c in &checks {
                println!(
                    "{} {:<40} {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                bail!("{failed} of {} checks failed", checks.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
