use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lmp_cli::{dispatch, load_config, CliError, Command};

#[derive(Parser)]
#[command(name = "lmp", version, about = "Simulate, estimate, and diagnose nonlinear panel earnings dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a synthetic panel and its latent components.
    Simulate(Common),
    /// Fit the model to a panel.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Continue from `<out>/checkpoint.json`.
        #[arg(long)]
        resume: bool,
    },
    /// Persistence, skewness, densities, and growth moments of a fitted model.
    Diagnose(Common),
    /// Simulate, estimate, and diagnose the canonical and nonlinear processes.
    Replicate(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `paths.out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (command, common, resume) = match cli.command {
        Cmd::Simulate(c) => (Command::Simulate, c, false),
        Cmd::Estimate { common, resume } => (Command::Estimate, common, resume),
        Cmd::Diagnose(c) => (Command::Diagnose, c, false),
        Cmd::Replicate(c) => (Command::Replicate, c, false),
    };
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let mut config = load_config(&common.config)?;
    if let Some(out) = common.out {
        config.paths.out_dir = out;
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    let manifest = dispatch(&config, command, resume)?;
    eprintln!(
        "{}: wrote {} files to {} in {:.1}s",
        manifest.command,
        manifest.outputs.len(),
        config.paths.out_dir.display(),
        manifest.wall_time_seconds
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
