use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

mod commands;
mod config;
mod output;

use config::{Command, RunConfig, Threads};

/// Batch runner for quasi-crystalline homogenization experiments.
#[derive(Debug, Parser)]
#[command(name = "quasihom", version)]
struct Args {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Worker threads: a positive integer or `auto`.
    #[arg(long)]
    threads: Option<String>,
    /// RNG seed (overrides `seed` in the config).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    verbose: bool,
}

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    NotConverged(String),
    Internal(String),
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        Self::Validation(msg.into())
    }

    pub fn context(self, key: &str) -> Self {
        match self {
            Self::Validation(m) => Self::Validation(format!("{key}: {m}")),
            Self::NotConverged(m) => Self::NotConverged(format!("{key}: {m}")),
            Self::Internal(m) => Self::Internal(format!("{key}: {m}")),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Validation(_) => 2,
            Self::NotConverged(_) => 3,
            Self::Internal(_) => 1,
        }
    }

    pub fn status(&self) -> &'static str {
        match self {
            Self::Validation(_) => "validation-error",
            Self::NotConverged(_) => "not-converged",
            Self::Internal(_) => "internal-error",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Self::Validation(m) | Self::NotConverged(m) | Self::Internal(m) => m,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.status(), self.message())
    }
}

impl From<quasihom::Error> for CliError {
    fn from(e: quasihom::Error) -> Self {
        use quasihom::Error as E;
        match e {
            E::InvalidInput(_) | E::Diophantine { .. } | E::UnvalidatedMap(_) | E::UnsupportedDemo(_) => {
                Self::Validation(e.to_string())
            }
            E::Internal(_) | E::Io(_) => Self::Internal(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Internal(e.to_string())
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    let level = if args.verbose { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let cfg = match RunConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(e.exit_code());
        }
    };
    match run(cfg, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cfg: RunConfig, args: &Args) -> Result<(), CliError> {
    let output_dir = args
        .output
        .clone()
        .or(cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let threads = match &args.threads {
        Some(t) => Threads::Named(t.clone()),
        None => cfg.threads.clone().unwrap_or(Threads::Named("auto".into())),
    }
    .resolve()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?;

    log::info!("{:?}: seed {seed}, {threads} threads, output {}", cfg.command, output_dir.display());
    let mut out = output::Outputs::create(output_dir, cfg.command, seed, threads)?;
    let result = commands::dispatch(cfg.command, &cfg.params, seed, &mut out);
    out.finish(&result)?;
    if matches!(cfg.command, Command::Pairing | Command::Verify1d) {
        if let Some(s) = out.summary() {
            print!("{s}");
        }
    }
    result
}
