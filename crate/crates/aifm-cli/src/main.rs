//! `aifm`: run acoustic inversion flow measurement experiments.
//!
//! Exit codes: 0 success, 2 validation/usage error, 3 numeric failure,
//! 4 I/O or container-format error.

use aifm_core::error::Error;
use aifm_core::pipeline::{
    preset, preset_names, run_evaluate, run_flow, run_generate, run_invert, run_pipeline,
    run_probe, sweep, ExperimentConfig, SweepPlan,
};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "aifm",
    version,
    about = "Acoustic inversion flow measurement: probe, reconstruct, estimate flow, evaluate"
)]
struct Cli {
    /// Worker threads (default: AIFM_THREADS or all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Seed, advect and rasterise the ground-truth particle volumes.
    Generate(StageArgs),
    /// Probe every snapshot and record receiver traces.
    Probe(StageArgs),
    /// Reconstruct the particle volume of every snapshot.
    Invert(StageArgs),
    /// Estimate the velocity field from consecutive reconstructions.
    Flow(StageArgs),
    /// Compute the error report against the ground truth.
    Evaluate(StageArgs),
    /// Run all stages in order (cached stages are skipped).
    Run(StageArgs),
    /// Run a parameter grid; comma-separated override values span axes.
    Sweep(SweepArgs),
    /// List or show named experiment presets.
    Preset {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Subcommand)]
enum PresetAction {
    /// Print every preset name.
    List,
    /// Print a preset's resolved configuration as TOML.
    Show { name: String },
}

#[derive(Args)]
struct StageArgs {
    /// Configuration file (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset instead of a config file.
    #[arg(long)]
    preset: Option<String>,
    /// Run directory for artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Replace the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-path config override, e.g. `inversion.iterations=40`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Comma-separated list of seeds to repeat each combination with.
    #[arg(long)]
    seeds: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| std::env::var("AIFM_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        // ignore failure when a pool already exists (tests call main twice)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(cause) = src {
                eprintln!("  caused by: {cause}");
                src = cause.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Error> {
    match command {
        Command::Generate(args) => stage(args, |cfg, out| run_generate(cfg, out).map(drop)),
        Command::Probe(args) => stage(args, |cfg, out| run_probe(cfg, out).map(drop)),
        Command::Invert(args) => stage(args, |cfg, out| run_invert(cfg, out).map(drop)),
        Command::Flow(args) => stage(args, |cfg, out| run_flow(cfg, out).map(drop)),
        Command::Evaluate(args) => stage(args, |cfg, out| {
            run_evaluate(cfg, out)?;
            print_report(out)
        }),
        Command::Run(args) => stage(args, |cfg, out| {
            let summary = run_pipeline(cfg, out)?;
            if summary.executed.is_empty() {
                println!("all stages were cache hits");
            } else {
                println!("executed: {}", summary.executed.join(", "));
            }
            print_report(out)
        }),
        Command::Sweep(args) => run_sweep(args),
        Command::Preset { action } => match action {
            PresetAction::List => {
                for name in preset_names() {
                    println!("{name}");
                }
                Ok(())
            }
            PresetAction::Show { name } => {
                let mut cfg = preset(&name)?;
                cfg.resolve()?;
                print!("{}", cfg.to_toml()?);
                Ok(())
            }
        },
    }
}

fn load_config(args: &StageArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), None) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            ExperimentConfig::from_toml(&text)?
        }
        (None, Some(name)) => preset(name)?,
        (None, None) => {
            return Err(Error::validation("one of --config or --preset is required"))
        }
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let overrides = parse_overrides(&args.overrides)?;
    cfg = cfg.with_overrides(&overrides)?;
    Ok(cfg)
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, Error> {
    raw.iter()
        .map(|entry| {
            entry
                .split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| {
                    Error::validation(format!("override {entry:?} is not KEY=VALUE"))
                })
        })
        .collect()
}

fn stage(
    args: StageArgs,
    f: impl FnOnce(&ExperimentConfig, &std::path::Path) -> Result<(), Error>,
) -> Result<(), Error> {
    let cfg = load_config(&args)?;
    f(&cfg, &args.out)
}

fn print_report(out: &std::path::Path) -> Result<(), Error> {
    let path = out.join("report").join("errors.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    println!("{text}");
    Ok(())
}

/// Sweep axes come from overrides whose value is a comma list outside
/// brackets: `--override "scenario.theta=1.05,1.57,2.09"`.
fn run_sweep(args: SweepArgs) -> Result<(), Error> {
    let out_dir = args.stage.out.clone();
    let overrides = parse_overrides(&args.stage.overrides)?;
    let mut axes = Vec::new();
    let mut fixed = Vec::new();
    for (key, value) in overrides {
        let values = split_axis(&value);
        if values.len() > 1 {
            axes.push((key, values));
        } else {
            fixed.push((key, value));
        }
    }
    let stripped = StageArgs {
        overrides: Vec::new(),
        ..args.stage
    };
    let cfg = load_config(&stripped)?.with_overrides(&fixed)?;
    let seeds = match &args.seeds {
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|e| Error::validation(format!("bad seed {s:?}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?,
        None => Vec::new(),
    };
    let plan = SweepPlan { axes, seeds };
    let outcome = sweep(&cfg, &plan, &out_dir)?;
    let failed = outcome
        .rows
        .iter()
        .filter(|r| r.outcome.is_err())
        .count();
    println!(
        "{} runs ({} failed); ledger: {}; aggregates: {}",
        outcome.rows.len(),
        failed,
        outcome.ledger_csv.display(),
        outcome.aggregate_csv.display()
    );
    Ok(())
}

/// Split on commas that are not inside brackets, so array-valued
/// overrides stay single values.
fn split_axis(value: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for ch in value.chars() {
        match ch {
            '[' => {
                depth += 1;
                cur.push(ch);
            }
            ']' => {
                depth -= 1;
                cur.push(ch);
            }
            ',' if depth == 0 => {
                out.push(cur.trim().to_string());
                cur.clear();
            }
            _ => cur.push(ch),
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}
