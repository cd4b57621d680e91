//! `avem`: command-line entry points for the benchmark, preference data,
//! training, evaluation and analysis pipelines.

mod analyze;
mod bench;
mod common;
mod eval;
mod pref;
mod stats;
mod train;

use clap::{Parser, Subcommand};

use common::CliResult;

#[derive(Debug, Parser)]
#[command(name = "avem", version, about = "Audiovisual emotion preference optimization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Caption clips, generate questions, filter and balance them into a benchmark.
    BenchBuild(bench::BenchArgs),
    /// Build preference records with typed rejections and rejected inputs.
    PrefBuild(pref::PrefArgs),
    /// Train the adapter policy on preference records.
    Train(train::TrainArgs),
    /// Score benchmark predictions, or predict with a trained checkpoint first.
    Eval(eval::EvalArgs),
    /// Attention shares and likelihood shifts before and after training, with plots.
    Analyze(analyze::AnalyzeArgs),
    /// Print the per-task benchmark table.
    Stats(stats::StatsArgs),
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::BenchBuild(a) => bench::run(a),
        Command::PrefBuild(a) => pref::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Analyze(a) => analyze::run(a),
        Command::Stats(a) => stats::run(a),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("avem: {e}");
        std::process::exit(e.exit_code());
    }
}
