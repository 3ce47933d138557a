use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use diffhmm_cli::config::RunConfig;
use diffhmm_cli::output::Summary;
use diffhmm_cli::{pipeline, CliError};

#[derive(Parser)]
#[command(name = "diffhmm", version, about = "Finite-rank hidden Markov approximations of diffusions")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `simulation.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Check the drift condition on the grid.
    Certify(Common),
    /// Build the finite-rank generator and compare resolvents, semigroups and invariant laws.
    Approximate(Common),
    /// Spectra of the grid generator, its resolvent and their finite-rank counterparts.
    Spectrum(Common),
    /// Monte Carlo checks of the diffusion, jump and hidden Markov samplers.
    Simulate(Common),
}

type Pipeline = fn(&RunConfig, &std::path::Path) -> Result<Summary, CliError>;

fn run(args: Args) -> Result<Summary, CliError> {
    let (common, f): (Common, Pipeline) = match args.command {
        Command::Certify(c) => (c, pipeline::cmd_certify),
        Command::Approximate(c) => (c, pipeline::cmd_approximate),
        Command::Spectrum(c) => (c, pipeline::cmd_spectrum),
        Command::Simulate(c) => (c, pipeline::cmd_simulate),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.simulation.seed = seed;
    }
    // The echoed config keeps its own `output.dir`, so results do not depend on `--out`.
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    f(&cfg, &out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Args::parse()) {
        Ok(summary) => {
            for (name, passed) in &summary.criteria {
                log::info!("{name}: {}", if *passed { "pass" } else { "fail" });
            }
            if summary.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("diffhmm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
