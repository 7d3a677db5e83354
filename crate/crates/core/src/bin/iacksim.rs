use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use iacksim::cli::{self, ClassificationRow, CliError, Figure, RunOptions};
use iacksim::config::ScenarioConfig;

#[derive(Parser)]
#[command(name = "iacksim", version, about = "QUIC instant-ACK handshake simulator")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of a scenario file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[arg(long)]
        parallelism: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rerun the canonical configuration behind a published result.
    Reproduce {
        #[arg(value_enum)]
        figure: Figure,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[arg(long)]
        parallelism: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Classify handshake observations (one JSON object per line).
    ClassifyFile {
        path: PathBuf,
        /// Write classification.csv here instead of stdout.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// List built-in client profiles.
    Profiles,
}

fn run(cmd: Command) -> Result<ExitCode, CliError> {
    match cmd {
        Command::Run {
            config,
            out_dir,
            parallelism,
            seed,
        } => {
            let cfg = ScenarioConfig::load(&config)?;
            let opts = RunOptions {
                out_dir,
                parallelism,
                seed,
            };
            let report = cli::run_scenario(&cfg, &opts)?;
            println!(
                "{} runs, {} completed; results in {}",
                report.rows.len(),
                report.rows.len() - report.failed.len(),
                opts.out_dir.display()
            );
            if report.failed.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                for id in &report.failed {
                    eprintln!("incomplete: {id}");
                }
                Ok(ExitCode::from(1))
            }
        }
        Command::Reproduce {
            figure,
            out_dir,
            parallelism,
            seed,
        } => {
            let opts = RunOptions {
                out_dir,
                parallelism,
                seed,
            };
            for f in cli::reproduce(figure, &opts)? {
                println!("{}", f.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::ClassifyFile { path, out_dir } => {
            let report = cli::classify_file(&path)?;
            for (line, msg) in &report.malformed {
                eprintln!("{}:{line}: {msg}", path.display());
            }
            match out_dir {
                Some(dir) => {
                    std::fs::create_dir_all(&dir).map_err(|source| CliError::Io {
                        path: dir.clone(),
                        source,
                    })?;
                    cli::write_csv::<ClassificationRow>(&dir.join("classification.csv"), &report.rows)?;
                }
                None => {
                    let text = cli::csv_string(&report.rows)?;
                    std::io::stdout()
                        .write_all(text.as_bytes())
                        .map_err(|source| CliError::Io {
                            path: "<stdout>".into(),
                            source,
                        })?;
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Profiles => {
            print!("{}", cli::profiles_table());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
