//! `reusesim`: builds maps, runs simulations and sweeps, and writes reports
//! and plot data.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Simulate online continual training co-located with LLM serving.
#[derive(Parser, Debug)]
#[command(author, version, about, after_long_help = config::CONFIG_HELP)]
struct Cli {
    /// Directory searched for `<name>.profile` files.
    #[arg(long, global = true, env = config::PROFILE_DIR_ENV)]
    profile_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build offloading and hedging maps for a model and GPU.
    Profile(ProfileArgs),
    /// Run one simulation and write its report.
    Run(RunArgs),
    /// Run paired colocated/baseline sweeps, or compare two saved reports.
    Compare(CompareArgs),
    /// Turn saved reports into TPT CDF and summary tables.
    Plotdata(PlotdataArgs),
    /// Generate a synthetic trace file from a config.
    Trace(TraceArgs),
}

/// Output directory handling shared by subcommands.
#[derive(Args, Debug)]
struct OutArgs {
    /// Directory for all outputs.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite a nonempty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
pub struct ProfileArgs {
    /// Config file; its model. and gpu. keys pick the profiles.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model preset, profile name or path; overrides the config.
    #[arg(long)]
    model: Option<String>,
    /// GPU preset, profile name or path; overrides the config.
    #[arg(long)]
    gpu: Option<String>,
    /// Training modes to profile.
    #[arg(long, value_delimiter = ',', default_value = "cpt,cpa")]
    modes: Vec<String>,
    #[arg(long, default_value_t = 500)]
    cached_step: u64,
    #[arg(long, default_value_t = 500)]
    incoming_step: u64,
    #[arg(long, default_value_t = 5)]
    batch_step: u64,
    #[arg(long, default_value_t = 8000)]
    max_cached: u64,
    #[arg(long, default_value_t = 8000)]
    max_incoming: u64,
    #[arg(long, default_value_t = 50)]
    max_batch: u64,
    /// Response length assumed by the hedging map.
    #[arg(long, default_value_t = 128)]
    output_tokens: u64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Experiment config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trace file; overrides `sim.trace`.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Map directory; overrides `sim.maps`.
    #[arg(long)]
    maps: Option<PathBuf>,
    /// Trace seed; overrides `sim.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// colocated, separate_cluster or serving_only; overrides `sim.mode`.
    #[arg(long)]
    mode: Option<String>,
    /// Also write the event log as events.jsonl.
    #[arg(long)]
    emit_events: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Experiment config file with `sweep.` keys.
    #[arg(long, conflicts_with = "reports", required_unless_present = "reports")]
    config: Option<PathBuf>,
    /// Two saved reports to compare instead of running sweeps.
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    reports: Option<Vec<PathBuf>>,
    /// Allow comparing reports of different traces.
    #[arg(long, requires = "reports")]
    unpaired: bool,
    /// Output directory; required for sweeps, optional for report comparison.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
pub struct PlotdataArgs {
    /// Saved reports (.csv or .jsonl).
    #[arg(long, num_args = 1.., required = true)]
    reports: Vec<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
pub struct TraceArgs {
    /// Experiment config file; its `sim.` keys describe the trace.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trace seed; overrides `sim.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Trace file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

/// Exit code for bad input of any kind.
const EXIT_VALIDATION: u8 = 2;
/// Exit code for a simulator invariant breach, which is always a bug.
const EXIT_INVARIANT: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    let breach = err
        .chain()
        .any(|e| matches!(e.downcast_ref::<reusesim::Error>(), Some(reusesim::Error::InvariantBreach { .. })));
    if breach {
        EXIT_INVARIANT
    } else {
        EXIT_VALIDATION
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let dir = cli.profile_dir.as_deref();
    let result = match cli.command {
        Command::Profile(a) => commands::profile(&a, dir),
        Command::Run(a) => commands::run(&a, dir),
        Command::Compare(a) => commands::compare(&a, dir),
        Command::Plotdata(a) => commands::plotdata(&a),
        Command::Trace(a) => commands::trace(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invariant_breach_maps_to_exit_three() {
        let breach = reusesim::Error::InvariantBreach {
            time: 1.0,
            event: "prefill".into(),
            detail: "ledger over capacity".into(),
        };
        let err = anyhow::Error::new(breach).context("running trace");
        assert_eq!(exit_code(&err), EXIT_INVARIANT);
        assert_eq!(exit_code(&anyhow::anyhow!("bad key")), EXIT_VALIDATION);
    }
}
