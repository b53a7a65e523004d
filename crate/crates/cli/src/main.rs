use std::path::PathBuf;
use std::process::ExitCode;

use attnfuse::selfcheck::run_selfcheck;
use attnfuse_cli::{parse_config, run, CliError, Command, CONFIG_REFERENCE};
use clap::{Parser, Subcommand};

const THREADS_ENV: &str = "ATTNFUSE_THREADS";

#[derive(Parser)]
#[command(
    name = "attnfuse",
    version,
    about = "Zero-shot video editing by fusing DDIM-inversion attention maps",
    after_help = concat!(
        "ENVIRONMENT\n  ATTNFUSE_THREADS  worker threads (0 or unset = sequential)\n\n",
        "EXIT CODES\n  0 success, 1 contract violation, 2 I/O error, 3 bad config\n"
    ),
    after_long_help = CONFIG_REFERENCE,
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
    /// Run config file (see `--help` for keys and defaults)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Sub {
    /// Invert the source video; writes the attention store and the noised latent
    Invert,
    /// Invert, then denoise under the edit prompt with attention fusion
    Edit,
    /// Edit with the edit prompt set to the source prompt
    Reconstruct,
    /// Run the built-in invariant checks
    Selfcheck,
}

fn threads() -> Result<usize, CliError> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(|n| n.max(1))
            .map_err(|_| CliError::Config(format!("{THREADS_ENV} must be a non-negative integer, got {v:?}"))),
    }
}

fn execute(cli: &Cli) -> Result<bool, CliError> {
    let command = match cli.command {
        Sub::Selfcheck => {
            let results = run_selfcheck(cli.seed.unwrap_or(0));
            for r in &results {
                println!("{r}");
            }
            return Ok(results.iter().all(|r| r.passed));
        }
        Sub::Invert => Command::Invert,
        Sub::Edit => Command::Edit,
        Sub::Reconstruct => Command::Reconstruct,
    };
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required for this subcommand".into()))?;
    let mut cfg = parse_config(path)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg = cfg.with_out(out.clone());
    }
    let summary = run(command, &cfg)?;
    println!("wrote {} files under {}", summary.written.len(), cfg.out.display());
    if let Some(mse) = summary.mse {
        println!("mse {mse}");
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = threads().and_then(|n| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Config(format!("cannot start {n} worker threads: {e}")))?;
        pool.install(|| execute(&cli))
    });
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
