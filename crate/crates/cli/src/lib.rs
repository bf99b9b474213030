//! The `stepprune` command line.
//!
//! Exit codes: 0 success, 1 validation error, 2 backend failure, 64 usage error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

mod commands;
pub mod config;
mod io;

pub use config::CliConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_BACKEND: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Backend(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Backend(_) => EXIT_BACKEND,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "error: {m}"),
            CliError::Backend(m) => write!(f, "backend error: {m}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Validation(format!("i/o: {e}"))
    }
}

#[derive(Parser, Debug)]
#[command(name = "stepprune", version, about = "Entropy-guided pruning of chain-of-thought steps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate traces from a completions endpoint.
    Collect(Common),
    /// Per-step token counts and entropies.
    Inspect(Common),
    /// Compress traces by pruning steps.
    Prune(Common),
    /// Score completions with the composite reward.
    Reward(Common),
    /// Accuracy sweep over pruning ratios and strategies.
    Sweep(Common),
    /// Token masking against matched step pruning.
    TokenBaseline(Common),
    /// Build a compressed dataset with a token-length filter.
    BuildDataset(Common),
    /// Check the information bound on random exact models.
    MiOracle(Common),
    /// Render a stored sweep report.
    Report(Common),
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Input file; `-` reads stdin.
    #[arg(long = "in", value_name = "PATH")]
    pub input: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// TOML config file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "FLOAT")]
    pub kappa: Option<f64>,
    /// low-entropy, high-entropy or random.
    #[arg(long, value_name = "STRATEGY")]
    pub strategy: Option<String>,
    #[arg(long, value_name = "UINT")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "STR")]
    pub skip_token: Option<String>,
    #[arg(long, value_name = "START:END:STEP")]
    pub ratios: Option<String>,
    /// Comma-separated; accepts low, high, random.
    #[arg(long, value_name = "CSV")]
    pub strategies: Option<String>,
    /// backend or synthetic.
    #[arg(long, value_name = "MODE", value_parser = ["backend", "synthetic"])]
    pub eval: Option<String>,
    #[arg(long, value_name = "URL")]
    pub endpoint: Option<String>,
    #[arg(long, value_name = "STR")]
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    #[arg(long, value_name = "NAME")]
    pub api_key_env: Option<String>,
    #[arg(long, value_name = "UINT")]
    pub jobs: Option<usize>,
    #[arg(long, value_name = "UINT")]
    pub max_tokens: Option<usize>,
    #[arg(long, value_name = "UINT")]
    pub tau_skip: Option<u64>,
    #[arg(long, value_name = "UINT")]
    pub tau_length: Option<u64>,
    /// table, csv or plotdata.
    #[arg(long, value_name = "FORMAT", value_parser = ["table", "csv", "plotdata"])]
    pub format: Option<String>,
}

/// Parses `argv` (program name first) and runs one subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    EXIT_OK
                }
                _ => {
                    let text = e.render().to_string();
                    eprint!("{text}");
                    if !text.contains("Usage:") {
                        use clap::CommandFactory;
                        eprintln!("\n{}", Cli::command().render_usage());
                    }
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.code()
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    let (flags, dataset) = match &command {
        Command::BuildDataset(f) => (f, true),
        Command::Collect(f)
        | Command::Inspect(f)
        | Command::Prune(f)
        | Command::Reward(f)
        | Command::Sweep(f)
        | Command::TokenBaseline(f)
        | Command::MiOracle(f)
        | Command::Report(f) => (f, false),
    };
    let mut config = CliConfig::load(flags.config.as_deref())?;
    config.apply(flags, dataset)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.run.jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Validation(format!("worker pool: {e}")))?;
    let ctx = commands::Context { hash: config.hash(), config, flags: flags.clone() };
    pool.install(|| match command {
        Command::Collect(_) => commands::collect(&ctx),
        Command::Inspect(_) => commands::inspect(&ctx),
        Command::Prune(_) => commands::prune(&ctx),
        Command::Reward(_) => commands::reward(&ctx),
        Command::Sweep(_) => commands::sweep(&ctx, false),
        Command::TokenBaseline(_) => commands::sweep(&ctx, true),
        Command::BuildDataset(_) => commands::build_dataset(&ctx),
        Command::MiOracle(_) => commands::mi_oracle(&ctx),
        Command::Report(_) => commands::report(&ctx),
    })
}
