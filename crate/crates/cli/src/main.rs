//! `disagg`: synthesize data, train a model, evaluate it.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
//! numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use disagg_core::experiment::{cmd_eval, cmd_synth, cmd_train, EvalPaths, ExperimentConfig};
use disagg_core::Error;

#[derive(Parser)]
#[command(
    name = "disagg",
    version,
    about = "Multi-label load disaggregation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(Common),
    /// Train the configured model and write model, trace and manifest.
    Train(Common),
    /// Evaluate trained models and write report.json and report.csv.
    Eval(EvalArgs),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Experiment config (JSON); optional when --model, --data and --out are given.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model file; defaults to the config's trained runs.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dataset directory; defaults to the held-out split of the config's run.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory for report.json and report.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes")
}

fn run(cli: Cli) -> Result<String, Error> {
    match cli.command {
        Command::Synth(common) => {
            let cfg = load(&common)?;
            let s = cmd_synth(&cfg)?;
            eprintln!(
                "wrote {} windows, {} appliances, {} readings per window, SNR {} to {}",
                s.windows,
                s.appliances,
                s.window_len,
                s.snr_db.map_or("none".to_string(), |v| format!("{v} dB")),
                s.output_dir.display()
            );
            Ok(to_json(&s))
        }
        Command::Train(common) => {
            let cfg = load(&common)?;
            Ok(to_json(&cmd_train(&cfg)?))
        }
        Command::Eval(args) => {
            let cfg = args
                .config
                .as_deref()
                .map(ExperimentConfig::load)
                .transpose()?;
            let paths = EvalPaths {
                model: args.model,
                data: args.data,
                out: args.out,
            };
            Ok(to_json(&cmd_eval(cfg.as_ref(), &paths)?))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(out) => {
            println!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
