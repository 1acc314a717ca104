use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use drive_core::experiment::{
    cmd_audit, cmd_evaluate, cmd_generate, cmd_train, read_json, resolve_output_dir, ExperimentConfig, StageArg,
    OUTPUT_DIR_ENV,
};
use drive_core::losses::LossMask;
use drive_core::metrics::Thresholds;
use drive_core::perturb::PerturbationSpec;
use drive_core::Error;

const EXIT_AUDIT_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_MISSING: u8 = 3;
const EXIT_INTERNAL: u8 = 4;

#[derive(Parser)]
#[command(name = "drive", version, about = "Train and audit concept-bottleneck regressors on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and print its manifest.
    Generate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the base model or fine-tune it.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        stage: Stage,
        /// Loss groups to enable for fine-tuning, e.g. "A,BC" or "A,BC,DE".
        #[arg(long)]
        mask: Option<String>,
    },
    /// Evaluate both checkpoints over a perturbation sweep.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// JSON array of perturbations; defaults to the config's sweep.
        #[arg(long)]
        sweep: Option<PathBuf>,
    },
    /// Audit the fine-tuned model against the base; exits 1 if any verdict fails.
    Audit {
        #[arg(long)]
        config: PathBuf,
        /// JSON object with keys ci, si, co, so; "inf" is accepted.
        #[arg(long)]
        thresholds: PathBuf,
        /// JSON perturbation; defaults to the configured PGD search.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Base,
    Drive,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::Json(_) => EXIT_CONFIG,
        Error::Missing { .. } | Error::Format { .. } | Error::Incompatible { .. } | Error::Binding { .. } => {
            EXIT_MISSING
        }
        _ => EXIT_INTERNAL,
    }
}

fn load_config(path: &Path) -> Result<(ExperimentConfig, PathBuf), Error> {
    let cfg = ExperimentConfig::load(path)?;
    let env = std::env::var(OUTPUT_DIR_ENV).ok();
    let out = resolve_output_dir(&cfg, env.as_deref());
    Ok((cfg, out))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Generate { config } => {
            let (cfg, out) = load_config(&config)?;
            print_json(&cmd_generate(&cfg, &out)?)?;
        }
        Command::Train { config, stage, mask } => {
            let (cfg, out) = load_config(&config)?;
            let mask = match mask {
                Some(m) => Some(LossMask::parse(&m).map_err(|e| Error::Config {
                    path: "--mask".into(),
                    detail: e.to_string(),
                })?),
                None => None,
            };
            let stage = match stage {
                Stage::Base => StageArg::Base,
                Stage::Drive => StageArg::Drive,
            };
            print_json(&cmd_train(&cfg, &out, stage, mask)?)?;
        }
        Command::Evaluate { config, sweep } => {
            let (cfg, out) = load_config(&config)?;
            let sweep: Vec<PerturbationSpec> = match sweep {
                Some(path) => read_json(&path)?,
                None => cfg.sweep.clone(),
            };
            print_json(&cmd_evaluate(&cfg, &out, &sweep)?)?;
        }
        Command::Audit { config, thresholds, spec } => {
            let (cfg, out) = load_config(&config)?;
            let thresholds: Thresholds = read_json(&thresholds)?;
            let spec = match spec {
                Some(path) => read_json(&path)?,
                None => cfg.train.pgd.spec(),
            };
            let report = cmd_audit(&cfg, &out, thresholds, &spec)?;
            print_json(&report)?;
            if !report.verdicts.all() {
                return Ok(EXIT_AUDIT_FAILED);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
