use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use genealogy::cli::{exit_code, run, Outcome, EXIT_CONFIG};
use genealogy::config::read_config;

/// Genealogy-valued branching processes: simulation, export and verification.
#[derive(Parser, Debug)]
#[command(version)]
struct Args {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicates: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long, env = "GENEALOGY_THREADS")]
    threads: Option<usize>,
    /// Report file for tests, directory for simulate/export.
    #[arg(long)]
    out: Option<PathBuf>,
}

const STACK: usize = 512 << 20;

fn main() -> ExitCode {
    let args = Args::parse();
    let code = std::thread::Builder::new()
        .stack_size(STACK)
        .spawn(move || body(args))
        .expect("spawn worker")
        .join()
        .unwrap_or(genealogy::cli::EXIT_FAIL);
    ExitCode::from(code)
}

fn body(args: Args) -> u8 {
    let mut cfg = match read_config(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return EXIT_CONFIG;
        }
    };
    cfg.seed = args.seed.or(cfg.seed);
    cfg.replicates = args.replicates.or(cfg.replicates);
    cfg.threads = args.threads.or(cfg.threads);
    cfg.out = args.out.or(cfg.out);
    let mut pool = rayon::ThreadPoolBuilder::new().stack_size(STACK / 4);
    if let Some(n) = cfg.threads {
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    match pool.install(|| run(&cfg)) {
        Ok(outcome) => {
            match &outcome {
                Outcome::Report(r) => {
                    if cfg.out.is_none() {
                        println!("{}", serde_json::to_string_pretty(r).expect("report serializes"));
                    }
                    eprintln!("{}", r.summary());
                }
                Outcome::Files(files) => {
                    for f in files {
                        eprintln!("wrote {}", f.display());
                    }
                }
            }
            outcome.code()
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
