//! Command-line runner for training experiments and run comparison.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use visd::harness::{compare_runs, format_summary, run_experiment, Resolver};

#[derive(Parser)]
#[command(name = "visd", version, about = "Feedback-conditioned self-distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write metrics, manifest and parameters.
    Run {
        /// Flat JSON config file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize metrics files: windowed means and steps-to-threshold.
    Compare {
        #[arg(long, default_value_t = 100)]
        window: usize,
        /// Reward threshold; defaults to 80% of the first run's final window.
        #[arg(long)]
        target: Option<f64>,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { config, preset, seed, steps, out } => {
            let mut r = Resolver::new();
            if let Some(path) = &config {
                r = r.file(path).with_context(|| format!("reading {}", path.display()))?;
            }
            r = r.process_env();
            if let Some(p) = preset {
                r = r.preset(&p).set("preset", p);
            }
            if let Some(s) = seed {
                r = r.set("seed", s);
            }
            if let Some(s) = steps {
                r = r.set("steps", s);
            }
            let mut cfg = r.resolve()?;
            if let Some(dir) = out {
                cfg.out_dir = Some(dir);
            }
            if cfg.out_dir.is_none() {
                cfg.out_dir = Some(PathBuf::from("runs").join(format!("{}_seed{}", cfg.preset, cfg.seed)));
            }
            let (output, files) = run_experiment(&cfg)?;
            let last = output.metrics.last().expect("at least one step");
            println!(
                "{} seed {}: {} steps, final reward {:.4}, answer accuracy {:.4}",
                cfg.preset,
                cfg.seed,
                output.metrics.len(),
                last.total_reward,
                last.answer_acc
            );
            println!("metrics: {}", files.metrics.display());
            println!("manifest: {}", files.manifest.display());
            println!("params: {}", files.params.display());
        }
        Command::Compare { window, target, files } => {
            let (threshold, runs) = compare_runs(&files, window, target)?;
            print!("{}", format_summary(threshold, window, &runs));
        }
    }
    Ok(())
}
