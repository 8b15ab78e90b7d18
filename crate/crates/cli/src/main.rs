mod commands;
mod formats;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Output moments of ReLU networks under Gaussian input, and Gaussian attacks
/// built on them.
#[derive(Parser)]
#[command(name = "netmoments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Args)]
pub struct Global {
    /// JSON config for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed (0 when neither sets one).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for output files; created if missing.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Series terms (series-error: a single term count instead of the sweep).
    #[arg(long, global = true)]
    pub terms: Option<usize>,
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Truncation error of the bivariate series against quadrature, per ρ and term count.
    SeriesError,
    /// Analytic moments against Monte Carlo on random networks.
    Tightness,
    /// Two-stage linearization of a network around a point.
    Linearize,
    /// Mean and variance of a network's outputs under a Gaussian input.
    Moments,
    /// Targeted, support-restricted or sparse-smooth Gaussian attack.
    Attack,
    /// Empirical fooling rate of a given noise distribution.
    Verify,
}

#[derive(Debug)]
pub enum Failure {
    /// The requested attack goal was not reached; carries a diagnostic record.
    Infeasible(serde_json::Value),
    Core(netmoments::Error),
    Other(String),
}

impl From<netmoments::Error> for Failure {
    fn from(e: netmoments::Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Infeasible(_) => 2,
            Failure::Core(e) if e.is_numerical() => 3,
            _ => 1,
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let g = &cli.global;
    if let Some(n) = g.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Other(e.to_string()))?;
    }
    std::fs::create_dir_all(&g.out)?;
    match cli.command {
        Command::SeriesError => commands::series_error_cmd(g),
        Command::Tightness => commands::tightness_cmd(g),
        Command::Linearize => commands::linearize_cmd(g),
        Command::Moments => commands::moments_cmd(g),
        Command::Attack => commands::attack_cmd(g),
        Command::Verify => commands::verify_cmd(g),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .init();
    // clap exits with 2 on usage errors, which is reserved for infeasible attacks.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Infeasible(diag) => eprintln!("{diag}"),
                Failure::Core(e) => eprintln!("error: {e}"),
                Failure::Other(msg) => eprintln!("error: {msg}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}
