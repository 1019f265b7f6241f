use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rifle::harness::output_dir;
use rifle::{oracle, run_experiment_in, Error, ExperimentConfig};

#[derive(Parser)]
#[command(name = "rifle", version, about = "Federated distillation simulator with KL trust scoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write metrics.csv, ledger.csv and summary.json.
    Run(RunArgs),
    /// Parse and validate a config file without running it.
    ValidateConfig {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
    },
    /// Brute-force reference computations.
    #[command(subcommand)]
    Oracle(OracleCommand),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides master_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides output_dir (RIFLE_OUT takes precedence over both).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Runs seeds seed, seed+1, ... into DIR/seed-<n>.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    repeat: u64,
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Mean row KL(P || Q); rows separated by ';', entries by ','.
    Kl {
        #[arg(long)]
        p: String,
        #[arg(long)]
        q: String,
    },
    /// Fraction of honest clients that were flagged.
    Pfpv {
        #[arg(long, value_delimiter = ',')]
        honest: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = Vec::<usize>::new())]
        flagged: Vec<usize>,
    },
    /// Round-trip bytes per client for the logit payload.
    Comm {
        #[arg(long)]
        n_public: u64,
        #[arg(long)]
        classes: u64,
        #[arg(long, default_value_t = 4)]
        bytes_per_value: u64,
        /// Penultimate width when the gradient share is sent.
        #[arg(long)]
        grad_d: Option<u64>,
    },
}

fn load(path: &Path) -> Result<ExperimentConfig, Error> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ExperimentConfig::parse(&text)
}

fn parse_rows(raw: &str) -> Result<Vec<Vec<f64>>, String> {
    raw.split(';')
        .map(|row| {
            row.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| format!("`{v}` is not a number")))
                .collect()
        })
        .collect()
}

fn run(args: RunArgs) -> ExitCode {
    let mut config = match load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Some(seed) = args.seed {
        config.master_seed = seed;
    }
    if let Some(out) = args.out {
        config.output_dir = out;
    }
    let base = output_dir(&config);
    let first = config.master_seed;
    for k in 0..args.repeat {
        let mut cfg = config.clone();
        cfg.master_seed = first + k;
        let dir = if args.repeat == 1 {
            base.clone()
        } else {
            base.join(format!("seed-{}", cfg.master_seed))
        };
        match run_experiment_in(&cfg, &dir) {
            Ok(result) => {
                let m = result.final_round();
                println!(
                    "seed {} -> {}: global_acc {:.4} pfpv {:.4} flagged [{}]",
                    cfg.master_seed,
                    dir.display(),
                    m.global_acc,
                    m.pfpv,
                    m.flags.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
                );
            }
            Err(e @ Error::Config(_)) => {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
            Err(e) => {
                eprintln!("error: seed {}: {e}", cfg.master_seed);
                return ExitCode::from(2);
            }
        }
    }
    ExitCode::SUCCESS
}

fn run_oracle(cmd: OracleCommand) -> ExitCode {
    match cmd {
        OracleCommand::Kl { p, q } => match (parse_rows(&p), parse_rows(&q)) {
            (Ok(p), Ok(q)) if p.len() == q.len() && p.iter().zip(&q).all(|(a, b)| a.len() == b.len()) => {
                println!("{}", oracle::kl_mean(&p, &q));
                ExitCode::SUCCESS
            }
            (Err(e), _) | (_, Err(e)) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
            _ => {
                eprintln!("error: --p and --q must have the same shape");
                ExitCode::from(1)
            }
        },
        OracleCommand::Pfpv { honest, flagged } => {
            let honest: BTreeSet<usize> = honest.into_iter().collect();
            let flagged: BTreeSet<usize> = flagged.into_iter().collect();
            println!("{}", oracle::pfpv(&honest, &flagged));
            ExitCode::SUCCESS
        }
        OracleCommand::Comm {
            n_public,
            classes,
            bytes_per_value,
            grad_d,
        } => {
            println!("{}", oracle::comm_bytes(n_public, classes, bytes_per_value, grad_d));
            ExitCode::SUCCESS
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match cli.command {
        Command::Run(args) => run(args),
        Command::ValidateConfig { config } => match load(&config) {
            Ok(_) => {
                println!("{}: ok", config.display());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        },
        Command::Oracle(cmd) => run_oracle(cmd),
    }
}
