use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "perturb-lab", version, about = "Word-embedding perturbation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic two-class corpus as TSV.
    GenToy {
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 200)]
        vocab_size: usize,
        /// Defaults to $PERTURB_LAB_SEED, then 42.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "toy.tsv")]
        out: PathBuf,
    },
    /// Grid search plus repeated test runs per strategy; writes CSV,
    /// table and resolved configuration.
    Experiment(RunArgs),
    /// Experiment at several training-set fractions; writes long CSV.
    Sweep(RunArgs),
    /// Run the built-in oracle suite.
    Verify {
        /// Random instances per architecture for the gradient checks.
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    /// Comma-separated strategy names.
    #[arg(long)]
    strategies: Option<String>,
    /// Comma-separated keep-probability grid.
    #[arg(long)]
    p: Option<String>,
    /// Comma-separated noise-scale grid.
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long)]
    runs: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    fractions: Option<String>,
    #[arg(long, value_parser = ["meanpool", "conv"])]
    arch: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    embeddings: Option<String>,
    /// Any other configuration key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn overrides(&self) -> anyhow::Result<BTreeMap<String, String>> {
        let mut map = BTreeMap::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| anyhow::anyhow!("--set expects key=value, got {kv:?}"))?;
            map.insert(k.trim().to_owned(), v.trim().to_owned());
        }
        let flags = [
            ("dataset", &self.dataset),
            ("strategies", &self.strategies),
            ("p", &self.p),
            ("sigma", &self.sigma),
            ("runs", &self.runs),
            ("seed", &self.seed),
            ("fractions", &self.fractions),
            ("arch", &self.arch),
            ("out", &self.out),
            ("embeddings", &self.embeddings),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                map.insert(key.to_owned(), v.clone());
            }
        }
        Ok(map)
    }
}

fn env_seed() -> Option<String> {
    std::env::var(perturb_lab::config::SEED_ENV).ok()
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::GenToy {
            n,
            vocab_size,
            seed,
            out,
        } => {
            let seed = match seed {
                Some(s) => s,
                None => match env_seed() {
                    Some(s) => s.trim().parse()?,
                    None => perturb_lab::config::DEFAULT_SEED,
                },
            };
            commands::gen_toy(n, vocab_size, seed, &out)?;
        }
        Command::Experiment(args) => {
            let spec = commands::resolve(args.config.as_deref(), &args.overrides()?, env_seed().as_deref())?;
            commands::experiment(&spec)?;
        }
        Command::Sweep(args) => {
            let spec = commands::resolve(args.config.as_deref(), &args.overrides()?, env_seed().as_deref())?;
            commands::sweep(&spec)?;
        }
        Command::Verify { instances } => {
            if !commands::verify(instances) {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
