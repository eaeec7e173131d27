use std::path::PathBuf;
use std::process::ExitCode;

use cgmsfem::fields::save_ensemble;
use cgmsfem::Error;
use cgmsfem_cli::experiment::{build_ensemble, exit_code, ExperimentConfig, RunReport};
use cgmsfem_cli::{compare_tables, run_to_dir};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cgmsfem",
    version,
    about = "Cluster-based multiscale solves for random elliptic problems"
)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write report.json, errors.csv, online_trace.csv and cluster CSVs.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Generate the configured ensemble and save it in the on-disk format.
    GenerateEnsemble {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Compare the error tables of two reports.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Relative tolerance per cell.
        #[arg(long, default_value_t = 0.01)]
        tol: f64,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> cgmsfem::Result<(ExperimentConfig, String)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(s) = seed {
        cfg.override_seed(s);
    }
    Ok((cfg, text))
}

fn load_report(path: &PathBuf) -> cgmsfem::Result<RunReport> {
    let text = std::fs::read(path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    Ok(serde_json::from_slice(&text)?)
}

fn execute(cli: Cli) -> cgmsfem::Result<i32> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed_override,
        } => {
            let (cfg, text) = load_config(&config, seed_override)?;
            // echo the file verbatim unless seeds were rewritten
            let echo = seed_override.is_none().then_some(text.as_str());
            let report = run_to_dir(&cfg, echo, &out)?;
            print!("{}", report.errors_csv());
            Ok(0)
        }
        Command::GenerateEnsemble {
            config,
            out,
            seed_override,
        } => {
            let (cfg, _) = load_config(&config, seed_override)?;
            let ens = build_ensemble(&cfg)?;
            save_ensemble(&ens, &out)?;
            println!("wrote {} realizations to {}", ens.len(), out.display());
            Ok(0)
        }
        Command::Compare { a, b, tol } => {
            let diff = compare_tables(&load_report(&a)?, &load_report(&b)?, tol)?;
            print!("{}", diff.summary());
            Ok(if diff.flags.is_empty() { 0 } else { 1 })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: could not configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
