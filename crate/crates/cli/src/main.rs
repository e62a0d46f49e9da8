use std::path::PathBuf;
use std::process::ExitCode;

use adabatch_cli::commands::{self, Options};
use adabatch_cli::plot::PlotKind;
use clap::{Args, Parser, Subcommand};

/// Adaptive batch-size training experiments.
#[derive(Parser)]
#[command(name = "adabatch", version)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct Common {
    /// Experiment file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output root; defaults to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the configured seeds with this one.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Worker threads (default: one per core).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Verb {
    /// Train every configured strategy over the shared seeds.
    Run(Common),
    /// Check the convergence guarantees on a convex theory config.
    Verify(Common),
    /// Replay batch schedules through the elastic cost model.
    Simulate(Common),
    /// Regenerate plot CSVs from earlier artifacts.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: Option<PlotKind>,
    },
}

impl From<Common> for Options {
    fn from(c: Common) -> Self {
        Options { config: c.config, out: c.out, seed_override: c.seed_override, jobs: c.jobs }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let mut stdout = std::io::stdout().lock();
    let result = match cli.verb {
        Verb::Run(c) => commands::run(&c.into(), &mut stdout),
        Verb::Verify(c) => commands::verify(&c.into(), &mut stdout),
        Verb::Simulate(c) => commands::simulate(&c.into(), &mut stdout),
        Verb::Plot { common, kind } => commands::plot(&common.into(), kind, &mut stdout),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let kind = if e.exit_code() == 1 { "invalid input" } else { "error" };
            eprintln!("adabatch: {kind}: {e:#}");
            ExitCode::from(e.exit_code())
        }
    }
}
