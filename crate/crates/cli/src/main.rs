use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use gossip_ula::experiment;
use gossip_ula::ingest;
use gossip_ula::rng::{self, purpose};

/// Exit status when at least one trial diverged.
const EXIT_DIVERGED: u8 = 2;

#[derive(Parser)]
#[command(
    name = "gossip-ula",
    version,
    about = "Gossip-based distributed Langevin sampling simulator"
)]
struct Cli {
    /// Worker threads for trial execution (defaults to all cores).
    #[arg(long, global = true, env = "GOSSIP_ULA_WORKERS")]
    workers: Option<usize>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every sweep point and trial of a config and write results.
    Run {
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long, env = "GOSSIP_ULA_OUT_DIR")]
        out: Option<PathBuf>,
    },
    /// Evaluate the step-size and contraction conditions for a config.
    CheckConditions {
        config: PathBuf,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Refit decay rates from the CSVs of a finished run.
    FitRates {
        results_dir: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Convert a raw dataset into shard CSVs usable by `custom` experiments.
    Ingest {
        #[arg(long, value_enum)]
        dataset: Dataset,
        /// Data file (gamma telescope) or directory of subject logs (mhealth).
        #[arg(long)]
        path: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        agents: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Held-out fraction (gamma telescope only).
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        /// Rows kept per shard (mhealth only).
        #[arg(long)]
        subsample: Option<usize>,
        /// Subject used as the test set (mhealth only).
        #[arg(long, default_value_t = 10)]
        test_subject: usize,
        /// Keep raw feature values instead of z-scoring them.
        #[arg(long)]
        raw: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Dataset {
    GammaTelescope,
    Mhealth,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { config, out } => {
            let loaded = gossip_ula::load_config(&config)?;
            let out_dir = out
                .or_else(|| loaded.config.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("results"));
            let outcome = experiment::run_experiment(&loaded, &out_dir, cli.workers)?;
            print!("{}", outcome.summary_table());
            println!("results written to {}", out_dir.display());
            if outcome.any_diverged() {
                for p in &outcome.points {
                    for d in &p.diverged {
                        eprintln!("diverged [{}]: {d}", p.label);
                    }
                }
                return Ok(ExitCode::from(EXIT_DIVERGED));
            }
        }
        Command::CheckConditions { config, json } => {
            let loaded = gossip_ula::load_config(&config)?;
            let report = experiment::check_conditions_for_config(&loaded.config)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", experiment::format_conditions(&report));
            }
        }
        Command::FitRates { results_dir, json } => {
            let fits = experiment::fit_rates(&results_dir)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&fits)?);
            } else {
                println!(
                    "{:<50} {:>8} {:>12} {:>8} {:>12} {:>8}",
                    "file", "burn_in", "cons_exp", "cons_r2", "kl_exp", "kl_r2"
                );
                for f in &fits {
                    let fmt = |fit: &Option<gossip_ula::metrics::DecayFit>| match fit {
                        Some(d) => (format!("{:.4}", d.exponent), format!("{:.3}", d.r_squared)),
                        None => ("n/a".into(), "n/a".into()),
                    };
                    let (ce, cr) = fmt(&f.consensus);
                    let (ke, kr) = fmt(&f.kl);
                    let name = f
                        .file
                        .strip_prefix(&results_dir)
                        .unwrap_or(&f.file)
                        .display()
                        .to_string();
                    println!(
                        "{name:<50} {:>8} {ce:>12} {cr:>8} {ke:>12} {kr:>8}",
                        f.burn_in
                    );
                    for note in &f.notes {
                        println!("    note: {note}");
                    }
                }
            }
        }
        Command::Ingest {
            dataset,
            path,
            out,
            agents,
            seed,
            test_fraction,
            subsample,
            test_subject,
            raw,
        } => {
            if agents == 0 {
                bail!("--agents must be >= 1");
            }
            let mut split_rng = rng::stream(seed, &[purpose::SPLIT]);
            let mut data = match dataset {
                Dataset::GammaTelescope => {
                    ingest::ingest_gamma_telescope(&path, agents, test_fraction, &mut split_rng)?
                }
                Dataset::Mhealth => {
                    let subjects: Vec<usize> = (1..=agents).collect();
                    ingest::ingest_mhealth(
                        &path,
                        &subjects,
                        test_subject,
                        subsample,
                        &mut split_rng,
                    )?
                }
            };
            if !raw {
                ingest::standardize(&mut data);
            }
            ingest::write_dataset(&out, &data)
                .with_context(|| format!("writing {}", out.display()))?;
            println!(
                "wrote {} shards of sizes {:?} and {} test rows to {}",
                data.shards.len(),
                data.summary.shard_sizes,
                data.summary.test_rows,
                out.display()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}
