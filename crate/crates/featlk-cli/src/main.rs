//! Command-line harness: training, single registrations, benchmark suites,
//! and the Jacobian step-size analysis.
//!
//! Exit codes: 0 success, 1 usage or I/O failure, 2 numerical failure
//! (diverged or rank-deficient registration).

mod bench;
mod commands;
mod config;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "featlk", version, about = "Point cloud registration harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a feature network on synthetic pairs; writes a checkpoint and a
    /// per-epoch CSV log.
    Train(commands::TrainArgs),
    /// Register a source cloud onto a template; prints the result as JSON.
    Register(commands::RegisterArgs),
    /// Run a benchmark suite; writes per-pair rows and aggregates as CSV.
    Bench(commands::BenchArgs),
    /// Compare numerical step sizes against the analytical Jacobian; writes
    /// entry-level CSV plus a correlation summary.
    JacobianAnalysis(commands::JacobianArgs),
}

fn init_thread_pool() {
    if let Ok(value) = std::env::var("FEATLK_THREADS") {
        if let Ok(threads) = value.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global();
        } else {
            eprintln!("warning: ignoring unparsable FEATLK_THREADS={value}");
        }
    }
}

fn main() {
    // Usage errors exit 1 (clap's default would be 2, which is reserved for
    // numerical failures here).
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    init_thread_pool();
    let outcome = match cli.command {
        Command::Train(args) => commands::run_train(args),
        Command::Register(args) => commands::run_register(args),
        Command::Bench(args) => commands::run_bench(args),
        Command::JacobianAnalysis(args) => commands::run_jacobian_analysis(args),
    };
    match outcome {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}
