use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mtsens_cli::commands::{self, Globals, SimulateArgs};
use mtsens_cli::config::Profile;
use mtsens_cli::error::CliError;

/// Sensitivity analysis for unmeasured confounding with multiple treatments
/// and a binary outcome.
#[derive(Debug, Parser)]
#[command(name = "mtsens", version)]
struct Cli {
    /// Master seed (default 1, or the config's `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Directory for output files.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Sum-of-trees run length.
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,
    /// No progress lines on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Adjusted pairwise effects for one prior specification.
    Analyze {
        config: PathBuf,
        /// Also write the pooled posterior samples as CSV.
        #[arg(long)]
        samples: bool,
    },
    /// Replicate a synthetic scenario and score each strategy.
    Simulate {
        /// illustrative, illustrative-nointeraction, contextual-umc1, contextual-umc2 or contextual-umc3
        scenario: String,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        /// Comma-separated: naive, oracle, I, I-marginal, I-strat, I-3rd-ignored, II-h<h>, III-below[-h<h>], III-above[-h<h>], IV
        #[arg(long, default_value = "naive,oracle,I")]
        strategies: String,
        #[arg(long, default_value = "strong")]
        overlap: String,
        /// Units per replication (default 1500; 10000 for 1:10:9).
        #[arg(long)]
        n: Option<usize>,
        /// 1:1:1 or 1:10:9 (default 1:1:1 under strong overlap, else 1:10:9).
        #[arg(long)]
        ratio: Option<String>,
        #[arg(long, default_value_t = 10)]
        m1: usize,
        #[arg(long, default_value_t = 10)]
        m2: usize,
        /// Write replication 0's observed data as CSV.
        #[arg(long)]
        write_data: bool,
    },
    /// Effect estimates over a grid of c(j,k) and c(k,j) values.
    Contour { config: PathBuf },
    /// Combine analyze or simulate JSON outputs into one table.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = Globals { seed: cli.seed, jobs: cli.jobs, out_dir: cli.out_dir, profile: cli.profile, quiet: cli.quiet };
    if let Some(jobs) = g.jobs.filter(|&j| j > 0) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--jobs {jobs}: {e}")))?;
    }
    match cli.command {
        Command::Analyze { config, samples } => commands::analyze(&config, samples, &g),
        Command::Simulate { scenario, reps, strategies, overlap, n, ratio, m1, m2, write_data } => {
            commands::simulate(&SimulateArgs { scenario, reps, strategies, overlap, n, ratio, m1, m2, write_data }, &g)
        }
        Command::Contour { config } => commands::contour(&config, &g),
        Command::Report { inputs } => commands::report(&inputs, &g),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
