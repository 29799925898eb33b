use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stablegrad::harness::{
    self, default_panels, exit_code, preset, run_scaleflow, write_scaleflow_csv, ExperimentConfig,
};
use stablegrad::optim::MultiplierTable;
use stablegrad::{Error, Result};

#[derive(Parser)]
#[command(name = "stablegrad", version, about = "Layer-wise gradient rescaling experiments for PINNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in experiment; see `--preset help`.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, `runs/<name>` by default.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Total step count; phase proportions are kept.
    #[arg(long)]
    steps_override: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write metrics.jsonl, summary.json and checkpoint.json.
    Train(Common),
    /// Train with kernel diagnostics and write table2.csv.
    Diagnose(Common),
    /// Per-layer forward/backward scales of deep MLPs, one CSV per panel.
    Scaleflow {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs/scaleflow")]
        out: PathBuf,
        /// Only the named panels.
        #[arg(long, value_delimiter = ',')]
        panels: Vec<String>,
    },
    /// Plain AdamW vs. scheduled AdamW vs. StableGrad on one seed.
    LrControl {
        #[command(flatten)]
        common: Common,
        /// `first,last,multiplier` CSV; the built-in 10-interval table otherwise.
        #[arg(long)]
        multipliers: Option<PathBuf>,
    },
    /// Write the reference field of the configured problem.
    ExportRef(Common),
    /// Repeat a run over several seeds and aggregate the summaries.
    SeedSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
}

fn load(common: &Common, default_preset: &str) -> Result<(ExperimentConfig, Option<PathBuf>, PathBuf)> {
    let (mut cfg, base) = match (&common.config, &common.preset) {
        (Some(path), _) => (ExperimentConfig::load(path)?, path.parent().map(Path::to_path_buf)),
        (None, Some(name)) if name == "help" => {
            return Err(Error::Config(format!("presets: {}", harness::PRESETS.join(", "))));
        }
        (None, name) => (preset(name.as_deref().unwrap_or(default_preset))?, None),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(n) = common.steps_override {
        cfg.override_steps(n);
    }
    cfg.validate(base.as_deref())?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
    Ok((cfg, base, out))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn aborted(reason: &Option<String>) -> Result<()> {
    match reason {
        Some(r) => Err(Error::NumericAbort {
            step: 0,
            reason: r.clone(),
        }),
        None => Ok(()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let (cfg, base, out) = load(&common, "burgers-desk")?;
            let res = harness::run_train(&cfg, Some(&out), base.as_deref())?;
            print_json(&res.summary)?;
            aborted(&res.summary.aborted)
        }
        Command::Diagnose(common) => {
            let (cfg, base, out) = load(&common, "burgers-diag")?;
            let res = harness::run_diagnose(&cfg, Some(&out), base.as_deref())?;
            print_json(&res.summary)?;
            eprintln!("wrote {}", out.join("table2.csv").display());
            aborted(&res.summary.aborted)
        }
        Command::Scaleflow { seed, out, panels } => {
            let all = default_panels(seed);
            if let Some(p) = panels.iter().find(|p| !all.iter().any(|q| &q.name == *p)) {
                let names: Vec<_> = all.iter().map(|q| q.name.as_str()).collect();
                return Err(Error::Config(format!("unknown panel {p:?}; available: {}", names.join(", "))));
            }
            for panel in all.iter().filter(|p| panels.is_empty() || panels.contains(&p.name)) {
                let rows = run_scaleflow(&panel.config)?;
                let path = write_scaleflow_csv(&out, &panel.name, &rows)?;
                eprintln!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::LrControl { common, multipliers } => {
            let (cfg, base, out) = load(&common, "burgers-desk")?;
            let table = match multipliers {
                Some(p) => MultiplierTable::from_csv(&p)?,
                None => MultiplierTable::table3(),
            };
            let (report, _) = harness::run_lr_control(&cfg, &table, Some(&out), base.as_deref())?;
            print_json(&report)
        }
        Command::ExportRef(common) => {
            let (cfg, _, out) = load(&common, "burgers-desk")?;
            let field = harness::reference_for(&cfg.problem, &cfg.validation.grid)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Config(format!("cannot create {}: {e}", out.display())))?;
            let path = out.join("reference.sgref");
            harness::export_reference(&field, &path)?;
            eprintln!("wrote {} ({} values)", path.display(), field.len());
            Ok(())
        }
        Command::SeedSweep { common, seeds } => {
            let (cfg, base, out) = load(&common, "burgers-desk")?;
            let report = harness::seed_sweep(&cfg, &seeds, Some(&out), base.as_deref())?;
            print_json(&report)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
