//! `commsim`: run simulator scenarios, the numerical invariant suite, and
//! parameter sweeps from a JSON experiment file.
//!
//! Exit codes: 0 success, 1 a verification check failed, 2 usage or
//! configuration error.

mod simulate;
mod sweep;
mod verify;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use commsim::config::ExperimentConfig;
use commsim::pipesim::{Ablation, Policy};

#[derive(Parser)]
#[command(
    name = "commsim",
    version,
    about = "Pipeline-parallel communication compression simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one iteration under the four policy ablations.
    Simulate(Common),
    /// Run the numerical invariant suite on the testbed.
    Verify(Common),
    /// Simulate every point on one sweep axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// pipeline_stages, rank, sc_fraction or bandwidth
        #[arg(long)]
        axis: String,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the testbed seed.
    #[arg(long)]
    seed: Option<u64>,
    /// baseline, cb, cb+fe or cb+fe+sc; defaults to the config's policy.
    #[arg(long)]
    policy: Option<String>,
}

/// Failure that maps to a specific exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Verification(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(format!("{e:#}"))
    }
}

pub struct Context {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    /// Policy after applying `--policy`.
    pub policy: Policy,
    /// Label for the policy in outputs.
    pub policy_name: String,
}

impl Context {
    fn load(common: &Common) -> Result<Self, Failure> {
        let mut config = ExperimentConfig::load(&common.config).map_err(|e| Failure::Usage(e.to_string()))?;
        if let Some(seed) = common.seed {
            config = config.with_seed(seed);
        }
        let (policy, policy_name) = match common.policy.as_deref() {
            None => (config.policy.clone(), "config".to_string()),
            Some(name) => {
                let a = Ablation::parse(name).ok_or_else(|| {
                    Failure::Usage(format!(
                        "unknown policy {name:?}; expected one of baseline, cb, cb+fe, cb+fe+sc"
                    ))
                })?;
                (a.policy(&config.policy), a.name().to_string())
            }
        };
        let out = common.out.clone().unwrap_or_else(|| config.output_dir.clone());
        std::fs::create_dir_all(&out)
            .map_err(|e| Failure::Usage(format!("cannot create output directory {}: {e}", out.display())))?;
        Ok(Self {
            config,
            out,
            policy,
            policy_name,
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.out.join(file)
    }
}

pub fn display(p: &Path) -> String {
    p.display().to_string()
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate(common) => simulate::run(&Context::load(&common)?),
        Command::Verify(common) => verify::run(&Context::load(&common)?),
        Command::Sweep { common, axis } => {
            let ctx = Context::load(&common)?;
            sweep::run(&ctx, &axis)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(1)
        }
    }
}
