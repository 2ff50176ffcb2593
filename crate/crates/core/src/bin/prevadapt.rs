use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use prevadapt::harness::{run_experiment, write_datasets, ExperimentConfig};
use prevadapt::metrics::{summarize_file, write_summary};

#[derive(Parser)]
#[command(name = "prevadapt", version, about = "Prevalence-adjusted prediction under shifting label-confounder correlations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write results, manifest, logs and checkpoints.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads for seed-level parallelism.
        #[arg(long)]
        threads: Option<usize>,
        /// Comma-separated seeds overriding the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Print mean F1 and standard error per method and site.
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Write the generated datasets only.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> prevadapt::Result<ExitCode> {
    match cli.command {
        Command::Run { config, out, threads, seeds } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            cfg.out_dir = Some(out.clone());
            cfg.validate()?;
            if let Some(n) = threads {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .map_err(|e| prevadapt::Error::Config(format!("thread pool: {e}")))?;
            }
            let outcome = run_experiment(&cfg)?;
            print_summary(&outcome.summary);
            println!("results written to {}", out.join("results.csv").display());
            if outcome.failures.is_empty() {
                return Ok(ExitCode::SUCCESS);
            }
            for f in &outcome.failures {
                eprintln!("FAILED {} {} seed {}: {}", f.method, f.site, f.seed, f.error);
            }
            Ok(ExitCode::from(1))
        }
        Command::Summarize { input } => {
            let summary = summarize_file(&input.join("results.csv"))?;
            write_summary(&input.join("summary.csv"), &summary)?;
            print_summary(&summary);
            Ok(ExitCode::SUCCESS)
        }
        Command::Gen { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            write_datasets(&cfg, &out)?;
            println!("datasets written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn print_summary(rows: &[prevadapt::metrics::SummaryRow]) {
    println!("{:<10} {:<10} {:>4} {:>8} {:>8}", "method", "site", "runs", "mean_f1", "stderr");
    for r in rows {
        println!("{:<10} {:<10} {:>4} {:>8.4} {:>8.4}", r.method, r.site, r.runs, r.mean_f1, r.stderr_f1);
    }
}
