//! Experiment configs, run orchestration and on-disk outputs.
//!
//! A run directory holds `metrics.jsonl` (one record per logged step),
//! `summary.json` (validation relative L2 and component losses),
//! `checkpoint.json` (final parameters) and, for diagnostic runs,
//! `table2.csv`.

mod config;
mod scaleflow;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{
    preset, DiagnosticsConfig, ExperimentConfig, NetworkConfig, OptimizerConfig, ScheduleConfig, ValidationConfig,
    PRESETS,
};
pub use scaleflow::{default_panels, run_scaleflow, write_scaleflow_csv, ScaleRow, ScaleflowConfig, ScaleflowPanel};

use crate::diagnostics::{update_geometry, DiagnosticSetup, KernelDiagnostics, UpdateGeometry, VALID_BLOCK_FLOOR};
use crate::error::{Error, Result};
use crate::linalg::SeededRng;
use crate::network::MlpNetwork;
use crate::optim::{MultiplierTable, Preprocessor, StableGradConfig, StepRecord, Trainer};
use crate::residuals::{
    burgers_reference, evaluate, relative_l2, sample_batch, ComponentLosses, Pde, ProblemSpec, ReferenceField,
};

pub const SCHEMA_VERSION: u32 = 1;

/// RNG stream ids forked from the run seed.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const VALIDATION: u64 = 3;
    pub const DIAGNOSTIC: u64 = 4;
    pub const POWER: u64 = 5;
    pub const PROBE: u64 = 6;
}

/// Process exit status for an error: 3 for numeric failures, 2 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numeric() {
        3
    } else {
        2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub loss: f64,
    pub pde_loss: f64,
    pub bc_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ic_loss: Option<f64>,
}

impl From<ComponentLosses> for ValidationMetrics {
    fn from(l: ComponentLosses) -> Self {
        ValidationMetrics {
            loss: l.total,
            pde_loss: l.pde,
            bc_loss: l.bc,
            ic_loss: l.ic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema: u32,
    #[serde(flatten)]
    pub step: StepRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<KernelDiagnostics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbortRecord {
    pub schema: u32,
    pub aborted: bool,
    pub step: usize,
    pub phase: usize,
    pub reason: String,
}

/// Validation loss after a given number of completed steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub steps: usize,
    pub loss: f64,
}

/// Final validation summary of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: u32,
    pub name: String,
    pub seed: u64,
    pub steps: usize,
    #[serde(default)]
    pub validation_l2: Option<f64>,
    #[serde(default)]
    pub validation: Option<ValidationMetrics>,
    #[serde(default)]
    pub final_train_loss: Option<f64>,
    #[serde(default)]
    pub aborted: Option<String>,
    pub validation_curve: Vec<CurvePoint>,
}

impl Summary {
    /// Completed steps after which the validation loss first reaches `target`.
    pub fn steps_to_reach(&self, target: f64) -> Option<usize> {
        self.validation_curve.iter().find(|p| p.loss <= target).map(|p| p.steps)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Checkpoint {
    schema: u32,
    name: String,
    seed: u64,
    steps: usize,
    params: Vec<f64>,
}

/// In-memory result of [`run_train`].
#[derive(Clone, Debug)]
pub struct RunResult {
    pub summary: Summary,
    pub records: Vec<MetricsRecord>,
    pub net: MlpNetwork,
    /// Geometry of the last realized update.
    pub final_geometry: Option<UpdateGeometry>,
}

impl RunResult {
    pub fn diagnostics(&self) -> Vec<(KernelDiagnostics, Option<f64>)> {
        self.records
            .iter()
            .filter_map(|r| r.diagnostics.map(|d| (d, r.validation.map(|v| v.loss))))
            .collect()
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", path.display())))
}

fn prepare_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::Config(format!("cannot create {}: {e}", out.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Reference field used for the validation relative L2 error.
pub fn reference_for(spec: &ProblemSpec, grid: &[usize]) -> Result<ReferenceField> {
    match spec.pde {
        Pde::Burgers1d { nu } => {
            let [nx, nt] = grid else {
                return Err(Error::Config("Burgers reference grid is [nx, nt]".into()));
            };
            burgers_reference(nu, *nx, *nt)
        }
        _ => {
            let [n] = grid else {
                return Err(Error::Config("reference grid is a single node count per axis".into()));
            };
            ReferenceField::analytic(spec, *n)
        }
    }
}

fn first_stablegrad(cfg: &ExperimentConfig) -> StableGradConfig {
    cfg.phases
        .iter()
        .find_map(|p| match p.preprocessor {
            Preprocessor::StableGrad(c) => Some(c),
            _ => None,
        })
        .unwrap_or_default()
}

/// Builds the initialized network of a config.
pub fn initial_network(cfg: &ExperimentConfig) -> Result<MlpNetwork> {
    let root = SeededRng::new(cfg.seed);
    let mut net = MlpNetwork::from_config(cfg.problem.coords(), &cfg.network.architecture)?;
    net.initialize(&cfg.network.init, &mut root.fork(streams::INIT));
    Ok(net)
}

/// Runs every phase of `cfg` and, when `out` is given, writes the run
/// directory. A numeric failure ends the run early with an abort record and
/// `summary.aborted` set.
pub fn run_train(cfg: &ExperimentConfig, out: Option<&Path>, base_dir: Option<&Path>) -> Result<RunResult> {
    cfg.validate(base_dir)?;
    let schedule = cfg.schedule(base_dir)?;
    let started = Instant::now();
    let root = SeededRng::new(cfg.seed);
    let spec = cfg.problem;
    let net = initial_network(cfg)?;
    let val_batch = sample_batch(&spec, cfg.validation.points, &mut root.fork(streams::VALIDATION))?;
    let diag = match &cfg.diagnostics {
        Some(d) => Some((
            d.every,
            DiagnosticSetup {
                spec,
                batch: sample_batch(&spec, d.points, &mut root.fork(streams::DIAGNOSTIC))?,
                stablegrad: d.stablegrad.unwrap_or_else(|| first_stablegrad(cfg)),
                power: d.power(),
                cap: d.jacobian_cap,
            },
        )),
        None => None,
    };
    let mut power_rng = root.fork(streams::POWER);
    let mut trainer = Trainer::new(
        net,
        spec,
        cfg.batch,
        cfg.optimizer.kind,
        schedule,
        root.fork(streams::BATCH),
    )?;

    let mut metrics = match out {
        Some(dir) => {
            prepare_dir(dir)?;
            Some(create(&dir.join("metrics.jsonl"))?)
        }
        None => None,
    };
    let total = cfg.total_steps();
    let mut records = Vec::new();
    let mut curve = Vec::new();
    let mut last_validation = None;
    let mut final_train = None;
    let mut final_geometry = None;
    let mut aborted = None;

    'phases: for (pi, phase) in cfg.phases.iter().enumerate() {
        for _ in 0..phase.steps {
            let t = trainer.step_count();
            let last = t + 1 == total;
            let checkpoint = diag.as_ref().filter(|(every, _)| t % every == 0 || last);
            let before = checkpoint.map(|_| trainer.net.clone());
            let outcome = match trainer.step(&phase.preprocessor, pi) {
                Ok(o) => o,
                Err(e) if e.is_numeric() => {
                    let rec = AbortRecord {
                        schema: SCHEMA_VERSION,
                        aborted: true,
                        step: t,
                        phase: pi,
                        reason: e.to_string(),
                    };
                    if let Some(w) = metrics.as_mut() {
                        serde_json::to_writer(&mut *w, &rec)?;
                        w.write_all(b"\n")?;
                    }
                    aborted = Some(rec.reason);
                    break 'phases;
                }
                Err(e) => return Err(e),
            };
            final_train = Some(outcome.record.loss);

            let mut val_at_checkpoint = None;
            let diagnostics = match (checkpoint, before) {
                (Some((_, setup)), Some(net0)) => {
                    val_at_checkpoint = Some(evaluate(&spec, &net0, &val_batch)?.losses().into());
                    Some(setup.measure(&net0, t, outcome.record.lr, Some(&outcome.delta), &mut power_rng)?)
                }
                _ => None,
            };
            let validate = (t + 1) % cfg.validation.every == 0 || last;
            let validation: Option<ValidationMetrics> = if validate {
                let v: ValidationMetrics = evaluate(&spec, &trainer.net, &val_batch)?.losses().into();
                if !v.loss.is_finite() {
                    aborted = Some(format!("non-finite validation loss after step {t}"));
                }
                curve.push(CurvePoint { steps: t + 1, loss: v.loss });
                last_validation = Some(v);
                Some(v)
            } else {
                val_at_checkpoint
            };
            if last {
                let blocks = trainer.net.param_layout().blocks(phase.preprocessor.block_mode());
                final_geometry = Some(update_geometry(
                    &outcome.theta_before,
                    &outcome.delta,
                    &blocks,
                    VALID_BLOCK_FLOOR,
                )?);
            }
            let logged = t % cfg.log_every == 0 || last || validate || diagnostics.is_some();
            if logged {
                let rec = MetricsRecord {
                    schema: SCHEMA_VERSION,
                    step: outcome.record,
                    validation,
                    diagnostics,
                    wall_clock_s: cfg.wall_clock.then(|| started.elapsed().as_secs_f64()),
                };
                if let Some(w) = metrics.as_mut() {
                    serde_json::to_writer(&mut *w, &rec)?;
                    w.write_all(b"\n")?;
                }
                records.push(rec);
            }
            if aborted.is_some() {
                break 'phases;
            }
        }
    }
    if let Some(w) = metrics.as_mut() {
        w.flush()?;
    }

    let validation_l2 = if aborted.is_none() && total > 0 {
        let field = reference_for(&spec, &cfg.validation.grid)?;
        Some(relative_l2(&trainer.net, &field, 8192)?)
    } else {
        None
    };
    let summary = Summary {
        schema: SCHEMA_VERSION,
        name: cfg.name.clone(),
        seed: cfg.seed,
        steps: trainer.step_count(),
        validation_l2,
        validation: last_validation,
        final_train_loss: final_train,
        aborted,
        validation_curve: curve,
    };
    if let Some(dir) = out {
        write_json(&dir.join("summary.json"), &summary)?;
        write_json(
            &dir.join("checkpoint.json"),
            &Checkpoint {
                schema: SCHEMA_VERSION,
                name: cfg.name.clone(),
                seed: cfg.seed,
                steps: trainer.step_count(),
                params: trainer.net.flat_params(),
            },
        )?;
    }
    let res = RunResult {
        summary,
        records,
        net: trainer.net,
        final_geometry,
    };
    if let (Some(dir), Some(_)) = (out, &cfg.diagnostics) {
        write_table2(&dir.join("table2.csv"), &res.diagnostics())?;
    }
    Ok(res)
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6e}"))
}

/// One row per checkpoint: step, validation loss, ρ, ρ_SG, s_SG, M_SG,
/// E_lin, R_std raw and scaled.
pub fn write_table2(path: &Path, rows: &[(KernelDiagnostics, Option<f64>)]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "step,val_loss,rho,rho_sg,s_sg,margin_sg,e_lin,r_std_raw,r_std_scaled,lambda_max_k,lambda_max_ksg")?;
    for (d, v) in rows {
        writeln!(
            w,
            "{},{},{:.6e},{:.6e},{:.6e},{:.6e},{},{:.6e},{:.6e},{:.6e},{:.6e}",
            d.epoch,
            fmt(*v),
            d.rho,
            d.rho_sg,
            d.s_sg,
            d.margin_sg,
            fmt(d.e_lin),
            d.r_std_raw,
            d.r_std_scaled,
            d.lambda_max_k,
            d.lambda_max_ksg
        )?;
    }
    w.flush()?;
    Ok(())
}

/// A training run with kernel diagnostics; fails if the config has none.
pub fn run_diagnose(cfg: &ExperimentConfig, out: Option<&Path>, base_dir: Option<&Path>) -> Result<RunResult> {
    if cfg.diagnostics.is_none() {
        return Err(Error::Config("diagnose needs a [diagnostics] section (try --preset burgers-diag)".into()));
    }
    run_train(cfg, out, base_dir)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: String,
    pub final_train_loss: Option<f64>,
    pub final_validation_loss: Option<f64>,
    pub validation_l2: Option<f64>,
    pub geometry: Option<UpdateGeometry>,
    pub aborted: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrControlReport {
    pub schema: u32,
    pub seed: u64,
    pub multipliers: MultiplierTable,
    pub arms: Vec<ArmReport>,
}

impl LrControlReport {
    pub fn arm(&self, name: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.arm == name)
    }
}

/// The three arms of the learning-rate control: `cfg` with every phase set
/// to plain AdamW (`plain`), the same with the piecewise multipliers of
/// `table` on top of the base rate (`boosted`), and every phase set to
/// StableGrad (`stablegrad`).
pub fn lr_control_configs(cfg: &ExperimentConfig, table: &MultiplierTable) -> Result<Vec<(String, ExperimentConfig)>> {
    table.validate()?;
    let sg = first_stablegrad(cfg);
    let plain = cfg.clone().with_preprocessor(Preprocessor::None);
    let mut boosted = plain.clone();
    boosted.optimizer.schedule = ScheduleConfig::PiecewiseMultiplier {
        intervals: Some(table.intervals.clone()),
        csv: None,
    };
    let stable = cfg.clone().with_preprocessor(Preprocessor::StableGrad(sg));
    Ok(vec![
        ("plain".into(), plain),
        ("boosted".into(), boosted),
        ("stablegrad".into(), stable),
    ])
}

pub fn run_lr_control(
    cfg: &ExperimentConfig,
    table: &MultiplierTable,
    out: Option<&Path>,
    base_dir: Option<&Path>,
) -> Result<(LrControlReport, Vec<RunResult>)> {
    let mut arms = Vec::new();
    let mut runs = Vec::new();
    for (name, arm_cfg) in lr_control_configs(cfg, table)? {
        let dir: Option<PathBuf> = out.map(|o| o.join(&name));
        let res = run_train(&arm_cfg, dir.as_deref(), base_dir)?;
        arms.push(ArmReport {
            arm: name,
            final_train_loss: res.summary.final_train_loss,
            final_validation_loss: res.summary.validation.map(|v| v.loss),
            validation_l2: res.summary.validation_l2,
            geometry: res.final_geometry,
            aborted: res.summary.aborted.clone(),
        });
        runs.push(res);
    }
    let report = LrControlReport {
        schema: SCHEMA_VERSION,
        seed: cfg.seed,
        multipliers: table.clone(),
        arms,
    };
    if let Some(o) = out {
        write_json(&o.join("lr_control.json"), &report)?;
    }
    Ok((report, runs))
}

/// Mean, min and max of one summary column across seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        Some(Spread {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().cloned().fold(f64::INFINITY, f64::min),
            max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema: u32,
    pub seeds: Vec<u64>,
    pub validation_l2: Option<Spread>,
    pub validation_loss: Option<Spread>,
    pub pde_loss: Option<Spread>,
    pub bc_loss: Option<Spread>,
    pub ic_loss: Option<Spread>,
    pub aborted: Vec<u64>,
    pub runs: Vec<Summary>,
}

/// Runs `cfg` once per seed (each in `out/seed_<s>`) and aggregates the
/// summaries over the runs that finished.
pub fn seed_sweep(cfg: &ExperimentConfig, seeds: &[u64], out: Option<&Path>, base_dir: Option<&Path>) -> Result<SweepReport> {
    let mut runs = Vec::new();
    for &s in seeds {
        let mut c = cfg.clone();
        c.seed = s;
        let dir = out.map(|o| o.join(format!("seed_{s}")));
        runs.push(run_train(&c, dir.as_deref(), base_dir)?.summary);
    }
    let ok: Vec<&Summary> = runs.iter().filter(|r| r.aborted.is_none()).collect();
    let col = |f: &dyn Fn(&Summary) -> Option<f64>| Spread::of(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
    let report = SweepReport {
        schema: SCHEMA_VERSION,
        seeds: seeds.to_vec(),
        validation_l2: col(&|r| r.validation_l2),
        validation_loss: col(&|r| r.validation.map(|v| v.loss)),
        pde_loss: col(&|r| r.validation.map(|v| v.pde_loss)),
        bc_loss: col(&|r| r.validation.map(|v| v.bc_loss)),
        ic_loss: col(&|r| r.validation.and_then(|v| v.ic_loss)),
        aborted: runs.iter().filter(|r| r.aborted.is_some()).map(|r| r.seed).collect(),
        runs: runs.clone(),
    };
    if let Some(o) = out {
        write_json(&o.join("seed_sweep.json"), &report)?;
    }
    Ok(report)
}

pub fn export_reference(field: &ReferenceField, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    field.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_reference(path: &Path) -> Result<ReferenceField> {
    let f = File::open(path).map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
    ReferenceField::read_from(&mut std::io::BufReader::new(f))
}
