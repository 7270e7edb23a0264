use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use meanfield_cli::{catalog, load, output, run_experiment, CliError};

#[derive(Parser)]
#[command(name = "meanfield", version, about = "Run mean-field reservoir experiments from TOML configs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment (bundled name or config path).
    Run {
        config: String,
        /// Output directory.
        #[arg(long, env = "MEANFIELD_OUT", default_value = "out")]
        out: PathBuf,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
        /// Seed for randomized fixtures; never affects the physics of a configured model.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// List the bundled experiments.
    List,
    /// Parse and build configs without running them; all bundled configs when none are given.
    Validate { configs: Vec<String> },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::List => {
            for (name, text) in catalog::BUNDLED {
                let cfg = meanfield_cli::ExperimentConfig::parse(text)?;
                println!("{name:<24} {:<12} {}", cfg.kind.as_str(), cfg.description);
            }
            Ok(())
        }
        Command::Validate { configs } => {
            let names: Vec<String> = if configs.is_empty() {
                catalog::BUNDLED.iter().map(|(n, _)| n.to_string()).collect()
            } else {
                configs
            };
            for name in names {
                let cfg = load(&name)?;
                meanfield_cli::experiments::check_buildable(&cfg)?;
                println!("{name}: ok");
            }
            Ok(())
        }
        Command::Run {
            config,
            out,
            threads,
            seed,
        } => {
            if let Some(n) = threads {
                if n == 0 {
                    return Err(CliError::config("--threads must be at least 1"));
                }
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .map_err(|e| CliError::Io(format!("thread pool: {e}")))?;
            }
            let cfg = load(&config)?;
            let artifacts = run_experiment(&cfg, seed)?;
            let csv_name = cfg.outputs.csv.clone().unwrap_or_else(|| format!("{}.csv", cfg.name));
            let json_name = cfg.outputs.json.clone().unwrap_or_else(|| format!("{}.json", cfg.name));
            let csv = output::write_atomic(&out, &csv_name, &artifacts.csv)?;
            let mut json = serde_json::to_vec_pretty(&artifacts.summary).expect("summary serializes");
            json.push(b'\n');
            let json = output::write_atomic(&out, &json_name, &json)?;
            println!("{}", csv.display());
            println!("{}", json.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("meanfield: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
