use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;
use ura_core::harness::{
    load_scenario, preset, preset_names, results_to_csv, results_to_json, run_scenario, run_sweep,
    write_resolved_config, write_results, OutputFormat, ResultRow, RunOptions, ScenarioConfig, SweepSpec,
};
use ura_core::UraError;

/// Monte Carlo simulator for pilot-free unsourced random access.
#[derive(Parser, Debug)]
#[command(name = "ura-sim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one scenario and aggregate its trials.
    Run(RunArgs),
    /// Run a scenario once per value of one parameter.
    Sweep(SweepArgs),
    /// Inspect the bundled scenarios.
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Subcommand, Debug)]
enum PresetAction {
    /// Print preset names with a one-line description.
    List,
}

#[derive(Args, Debug)]
struct Common {
    /// Scenario file (JSON).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Bundled scenario name (see `presets list`).
    #[arg(long)]
    preset: Option<String>,
    /// Override one scenario field, e.g. `--set dl.max_iters=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Results file; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Fill the runtime column with the mean wall time per trial.
    #[arg(long)]
    timing: bool,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Parameter to vary; defaults to the scenario's own sweep.
    #[arg(long, requires = "values")]
    param: Option<String>,
    /// Comma-separated values, each read as JSON when possible.
    #[arg(long, value_delimiter = ',', requires = "param")]
    values: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
        }
    }
}

fn parse_value(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

fn load(common: &Common) -> Result<ScenarioConfig, UraError> {
    let mut cfg = match (&common.config, &common.preset) {
        (Some(path), _) => load_scenario(path)?,
        (None, Some(name)) => preset(name)?,
        (None, None) => return Err(UraError::Config("one of --config or --preset is required".into())),
    };
    for kv in &common.overrides {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| UraError::Config(format!("override `{kv}` is not KEY=VALUE")))?;
        cfg = cfg.with_param(key.trim(), &parse_value(value.trim()))?;
    }
    if let Some(t) = common.trials {
        cfg.trials = t;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn resolved_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("results");
    out.with_file_name(format!("{stem}.resolved.json"))
}

fn emit(rows: &[ResultRow], cfg: &ScenarioConfig, common: &Common) -> Result<(), UraError> {
    let resolved = cfg.resolve()?;
    log::info!(
        "resolved scenario: {}",
        serde_json::to_string(&resolved).expect("serializable")
    );
    match &common.out {
        Some(path) => {
            write_results(rows, path, common.format.into())?;
            write_resolved_config(&resolved, &resolved_path(path))?;
        }
        None => match common.format {
            Format::Csv => print!("{}", results_to_csv(rows)?),
            Format::Json => println!("{}", results_to_json(rows)),
        },
    }
    Ok(())
}

fn options(common: &Common) -> RunOptions {
    RunOptions {
        workers: common.workers,
        timing: common.timing,
    }
}

fn execute(cli: Cli) -> Result<(), UraError> {
    match cli.command {
        Command::Run(args) => {
            let mut cfg = load(&args.common)?;
            cfg.sweep = None;
            cfg.resolve()?;
            let row = run_scenario(&cfg, options(&args.common))?;
            emit(&[row], &cfg, &args.common)
        }
        Command::Sweep(args) => {
            let mut cfg = load(&args.common)?;
            let mut sweep = match args.param {
                Some(param) => SweepSpec {
                    param,
                    values: args.values.iter().map(|v| parse_value(v.trim())).collect(),
                    trials: None,
                },
                None => cfg
                    .sweep
                    .clone()
                    .ok_or_else(|| UraError::Config("scenario has no sweep; pass --param and --values".into()))?,
            };
            if sweep.values.is_empty() {
                return Err(UraError::Config("sweep needs at least one value".into()));
            }
            if let Some(t) = args.common.trials {
                sweep.trials = Some(t);
            }
            cfg.sweep = None;
            cfg.resolve()?;
            let rows = run_sweep(&cfg, &sweep, options(&args.common))?;
            cfg.sweep = Some(sweep);
            emit(&rows, &cfg, &args.common)
        }
        Command::Presets {
            action: PresetAction::List,
        } => {
            for (name, description) in preset_names() {
                println!("{name:<16} {description}");
            }
            Ok(())
        }
    }
}

fn exit_code(err: &UraError) -> u8 {
    match err {
        UraError::Config(_) | UraError::InfeasibleCodebook { .. } | UraError::Parse { .. } => 1,
        _ => 2,
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
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
