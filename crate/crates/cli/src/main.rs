use clap::{Parser, Subcommand};
use mmesh::experiment::{self, ExperimentConfig, RunError};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mmesh", version, about = "Metric-driven moving mesh generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Adapt a mesh as described by a config file.
    Run {
        config: PathBuf,
        /// Output directory; overrides output.dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the property oracles.
    Check {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Summarise the artifacts of a finished run.
    Report { dir: PathBuf },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_SOLVER: u8 = 3;

fn configure_threads(config_threads: usize) {
    let threads = std::env::var("MMESH_THREADS").ok().and_then(|v| v.parse().ok()).unwrap_or(config_threads);
    if threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            log::warn!("could not set thread count: {e}");
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run { config, out } => {
            let cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            configure_threads(cfg.runtime.threads);
            match experiment::run(&cfg, out.as_deref()) {
                Ok(o) => {
                    let r = &o.report;
                    println!(
                        "NC {}  Q_eq {:.5}  Q_ali {:.5}  Q_geo {:.5}  e_L2 {:.5}  time {:.3}s  steps {}",
                        o.mesh.n_cells(),
                        r.q_eq,
                        r.q_ali,
                        r.q_geo,
                        r.e_l2.unwrap_or(f64::NAN),
                        o.time_s,
                        o.steps
                    );
                    println!("artifacts in {}", o.out_dir.display());
                    ExitCode::SUCCESS
                }
                Err(RunError::Config(e)) => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_CONFIG)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_SOLVER)
                }
            }
        }
        Command::Check { seed } => {
            configure_threads(0);
            let lines = experiment::check(seed);
            for l in &lines {
                println!("[{}] {}: {}", if l.passed { "PASS" } else { "FAIL" }, l.name, l.detail);
            }
            if lines.iter().all(|l| l.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Command::Report { dir } => match experiment::report(&dir) {
            Ok(text) => {
                print!("{text}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::FAILURE
            }
        },
    }
}
