mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

/// Invalid or inconsistent configuration (exit code 4).
#[derive(Debug)]
pub struct ConfigError(pub String);

/// A result or transcript failed verification (exit code 2).
#[derive(Debug)]
pub struct VerifyFailure(pub String);

/// The dispute was lost because a party missed a deadline (exit code 3).
#[derive(Debug)]
pub struct TimeoutLoss(pub String);

macro_rules! message_error {
    ($($t:ident),*) => {$(
        impl std::fmt::Display for $t {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(&self.0)
            }
        }
        impl std::error::Error for $t {}
    )*};
}
message_error!(ConfigError, VerifyFailure, TimeoutLoss);

#[derive(Parser)]
#[command(name = "tolver", version, about = "Tolerance-aware optimistic verification of operator graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a built-in model as a graph file plus weight tensors.
    Zoo(Common),
    /// Calibrate per-operator thresholds and stability diagnostics.
    Calibrate(Common),
    /// Execute the request as proposer and post the commitment to a new ledger.
    Commit(Common),
    /// Screen the committed result as challenger; post a challenge if it is
    /// dispute-worthy.
    Challenge(Common),
    /// Play a full request and dispute between simulated parties.
    Run(Common),
    /// Rebuild the dispute state from a ledger.
    Replay(ReplayArgs),
    /// Bound-aware PGD attack sweep; writes a CSV table.
    Attack(Common),
    /// Dispute microbenchmarks over split sizes; writes a CSV table.
    Bench(BenchArgs),
}

/// Flags shared by all subcommands; each overrides the config file.
#[derive(Args, Debug, Default, Clone)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in model: mlp, cnn, transformer or chain.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    thresholds: Option<PathBuf>,
    #[arg(long)]
    ledger: Option<PathBuf>,
    /// Request input tensor file.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory, or CSV path for attack and bench.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Split size N.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    window: Option<u64>,
    #[arg(long)]
    committee: Option<usize>,
    #[arg(long)]
    fp_mode: Option<String>,
    /// Threshold multiplier for calibration, or attack scale.
    #[arg(long)]
    alpha: Option<f64>,
    /// Calibration inputs.
    #[arg(long)]
    dataset_size: Option<usize>,
    /// Comma-separated calibration profiles.
    #[arg(long)]
    profiles: Option<String>,
    #[arg(long)]
    proposer_profile: Option<String>,
    #[arg(long)]
    challenger_profile: Option<String>,
    /// honest, silent or forge-record.
    #[arg(long)]
    proposer: Option<String>,
    /// honest, eager or silent.
    #[arg(long)]
    challenger: Option<String>,
    /// Fault injection, e.g. `node=12,scale=10`.
    #[arg(long)]
    inject: Option<String>,
    /// Attack mode: theo-d, theo-p, emp or none.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    budget: Option<usize>,
    /// Attack inputs.
    #[arg(long)]
    inputs: Option<usize>,
    /// Seed of the request input.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    model_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    #[command(flatten)]
    common: Common,
    /// State file written by `run`; the replayed state must equal it.
    #[arg(long)]
    expect_state: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated split sizes.
    #[arg(long, default_value = "2,4,8,12")]
    sizes: String,
    /// Injected faults per split size.
    #[arg(long, default_value_t = 10)]
    sites: usize,
}

fn parse_kebab<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> anyhow::Result<T> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| ConfigError(format!("unknown {what} behaviour `{s}`")).into())
}

impl Common {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($field:ident => $($path:tt)+) => {
                if let Some(v) = &self.$field {
                    $($path)+ = v.clone().into();
                }
            };
        }
        set!(model => c.paths.model);
        set!(graph => c.paths.graph);
        set!(weights => c.paths.weights);
        set!(thresholds => c.paths.thresholds);
        set!(ledger => c.paths.ledger);
        set!(input => c.paths.input);
        set!(out => c.paths.out);
        set!(n => c.protocol.n);
        set!(window => c.protocol.window);
        set!(committee => c.protocol.committee_size);
        set!(fp_mode => c.protocol.fp_mode);
        set!(dataset_size => c.calibration.dataset_size);
        set!(proposer_profile => c.parties.proposer_profile);
        set!(challenger_profile => c.parties.challenger_profile);
        set!(inject => c.parties.inject);
        set!(mode => c.attack.mode);
        set!(budget => c.attack.budget);
        set!(inputs => c.attack.inputs);
        set!(seed => c.seeds.input);
        set!(model_seed => c.seeds.model);
        if let Some(a) = self.alpha {
            c.calibration.alpha = a;
            c.attack.alpha = a;
        }
        if let Some(p) = &self.profiles {
            c.calibration.profiles = p.split(',').map(|s| s.trim().to_string()).collect();
        }
        if let Some(b) = &self.proposer {
            c.parties.proposer = parse_kebab("proposer", b)?;
        }
        if let Some(b) = &self.challenger {
            c.parties.challenger = parse_kebab("challenger", b)?;
        }
        Ok(c)
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Zoo(a) => commands::zoo(&a.resolve()?),
        Command::Calibrate(a) => commands::calibrate(&a.resolve()?),
        Command::Commit(a) => commands::commit(&a.resolve()?),
        Command::Challenge(a) => commands::challenge(&a.resolve()?),
        Command::Run(a) => commands::run(&a.resolve()?),
        Command::Replay(a) => commands::replay(&a.common.resolve()?, a.expect_state.as_deref()),
        Command::Attack(a) => commands::attack(&a.resolve()?),
        Command::Bench(a) => {
            let sizes = a
                .sizes
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| ConfigError(format!("--sizes: {e}")))?;
            commands::bench(&a.common.resolve()?, &sizes, a.sites)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = if e.downcast_ref::<ConfigError>().is_some() {
                4
            } else if e.downcast_ref::<VerifyFailure>().is_some() {
                2
            } else if e.downcast_ref::<TimeoutLoss>().is_some() {
                3
            } else {
                1
            };
            ExitCode::from(code)
        }
    }
}
