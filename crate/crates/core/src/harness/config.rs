use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::PowerIterationConfig;
use crate::network::{Activation, ArchitectureConfig, FourierFeatures, Initializer};
use crate::optim::{LrSchedule, MultiplierTable, OptimizerKind, Phase, Preprocessor, ReferenceScale, Schedule, StableGradConfig};
use crate::residuals::{BatchSizes, ProblemSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    #[serde(flatten)]
    pub architecture: ArchitectureConfig,
    #[serde(default)]
    pub init: Initializer,
}

/// Schedule as written in a config; piecewise tables may come from a CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleConfig {
    #[default]
    Constant,
    CosineAnnealing,
    WarmupThenConstant { warmup: usize },
    /// Inline `intervals`, a `csv` path, or the built-in 10 × 500-epoch table
    /// when neither is given.
    PiecewiseMultiplier {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        intervals: Option<Vec<(u64, u64, f64)>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        csv: Option<PathBuf>,
    },
}

impl ScheduleConfig {
    pub fn resolve(&self, base_dir: Option<&Path>) -> Result<LrSchedule> {
        Ok(match self {
            ScheduleConfig::Constant => LrSchedule::Constant,
            ScheduleConfig::CosineAnnealing => LrSchedule::CosineAnnealing,
            ScheduleConfig::WarmupThenConstant { warmup } => LrSchedule::WarmupThenConstant { warmup: *warmup },
            ScheduleConfig::PiecewiseMultiplier { intervals, csv } => {
                let table = match (intervals, csv) {
                    (Some(_), Some(_)) => {
                        return Err(Error::Config("give either inline intervals or a csv table, not both".into()))
                    }
                    (Some(iv), None) => MultiplierTable { intervals: iv.clone() },
                    (None, Some(p)) => {
                        let path = match base_dir {
                            Some(d) if p.is_relative() => d.join(p),
                            _ => p.clone(),
                        };
                        MultiplierTable::from_csv(&path)?
                    }
                    (None, None) => MultiplierTable::table3(),
                };
                table.validate()?;
                LrSchedule::PiecewiseMultiplier { table }
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default)]
    pub schedule: ScheduleConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationConfig {
    /// Fixed, separately seeded validation batch.
    pub points: BatchSizes,
    /// Validation cadence in steps; the last step is always validated.
    pub every: usize,
    /// Reference grid: nodes per axis (Poisson, Helmholtz) or `[nx, nt]`.
    pub grid: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsConfig {
    pub every: usize,
    pub points: BatchSizes,
    /// Rescaling used to form `P`; defaults to the run's StableGrad settings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stablegrad: Option<StableGradConfig>,
    #[serde(default = "default_cap")]
    pub jacobian_cap: usize,
    #[serde(default = "default_power_tol")]
    pub power_tol: f64,
    #[serde(default = "default_power_iters")]
    pub power_max_iter: usize,
}

fn default_cap() -> usize {
    crate::diagnostics::DEFAULT_JACOBIAN_CAP
}

fn default_power_tol() -> f64 {
    1e-6
}

fn default_power_iters() -> usize {
    2000
}

impl DiagnosticsConfig {
    pub fn power(&self) -> PowerIterationConfig {
        PowerIterationConfig {
            tol: self.power_tol,
            max_iter: self.power_max_iter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub problem: ProblemSpec,
    pub network: NetworkConfig,
    pub optimizer: OptimizerConfig,
    pub phases: Vec<Phase>,
    pub batch: BatchSizes,
    pub validation: ValidationConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<DiagnosticsConfig>,
    /// Metrics stride; the first and last steps are always logged.
    #[serde(default = "one")]
    pub log_every: usize,
    /// Add elapsed seconds to each record (breaks byte-identical reruns).
    #[serde(default)]
    pub wall_clock: bool,
}

fn one() -> usize {
    1
}

impl ExperimentConfig {
    pub fn total_steps(&self) -> usize {
        self.phases.iter().map(|p| p.steps).sum()
    }

    pub fn schedule(&self, base_dir: Option<&Path>) -> Result<Schedule> {
        let s = Schedule {
            base_lr: self.optimizer.lr,
            total_steps: self.total_steps(),
            kind: self.optimizer.schedule.resolve(base_dir)?,
        };
        s.validate()?;
        Ok(s)
    }

    /// Checks every invariant that does not need a run.
    pub fn validate(&self, base_dir: Option<&Path>) -> Result<()> {
        self.problem.validate()?;
        let a = &self.network.architecture;
        if a.width == 0 || a.output_dim != 1 {
            return Err(Error::Config("network needs width > 0 and a scalar output".into()));
        }
        if a.norm.is_some() {
            return Err(Error::Config(
                "normalization layers cannot carry input-derivative channels; use them only in scaleflow runs".into(),
            ));
        }
        if self.phases.is_empty() {
            return Err(Error::Config("at least one phase is required".into()));
        }
        for p in &self.phases {
            if let Preprocessor::StableGrad(c) = &p.preprocessor {
                c.validate()?;
            }
        }
        if self.batch.pde == 0 || self.batch.bc == 0 || (self.problem.has_ic() && self.batch.ic == 0) {
            return Err(Error::Config("every residual block needs at least one training point".into()));
        }
        if self.validation.every == 0 || self.log_every == 0 {
            return Err(Error::Config("validation cadence and log stride must be positive".into()));
        }
        let want = if self.problem.has_ic() { 2 } else { 1 };
        if self.validation.grid.len() != want || self.validation.grid.iter().any(|&n| n < 2) {
            return Err(Error::Config(format!(
                "validation grid needs {want} entr{} of at least 2 nodes",
                if want == 1 { "y" } else { "ies" }
            )));
        }
        if let Some(d) = &self.diagnostics {
            if d.every == 0 {
                return Err(Error::Config("diagnostic cadence must be positive".into()));
            }
        }
        self.schedule(base_dir)?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// Reads and validates a config; relative table paths resolve against
    /// the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = Self::from_toml_str(&text)?;
        cfg.validate(path.parent())?;
        Ok(cfg)
    }

    /// Replaces the step counts, keeping the phase proportions; one phase
    /// gets all the steps.
    pub fn override_steps(&mut self, steps: usize) {
        let total = self.total_steps();
        if self.phases.len() == 1 || total == 0 {
            self.phases.truncate(1);
            self.phases[0].steps = steps;
            return;
        }
        let mut left = steps;
        let n = self.phases.len();
        for (i, p) in self.phases.iter_mut().enumerate() {
            let s = if i + 1 == n { left } else { p.steps * steps / total };
            p.steps = s;
            left -= s;
        }
    }

    /// Every phase uses `pre`.
    pub fn with_preprocessor(mut self, pre: Preprocessor) -> Self {
        for p in &mut self.phases {
            p.preprocessor = pre;
        }
        self
    }
}

pub const PRESETS: [&str; 6] = [
    "burgers-desk",
    "burgers-diag",
    "poisson-desk",
    "helmholtz-desk",
    "burgers-paper",
    "poisson-paper",
];

fn stablegrad_phase(steps: usize) -> Phase {
    Phase {
        steps,
        preprocessor: Preprocessor::StableGrad(StableGradConfig::default()),
    }
}

/// StableGrad with `σ_ref = std(r)`, the scale used by the diagnostic run.
fn residual_std_phase(steps: usize) -> Phase {
    Phase {
        steps,
        preprocessor: Preprocessor::StableGrad(StableGradConfig {
            reference_scale: ReferenceScale::ResidualStd,
            ..StableGradConfig::default()
        }),
    }
}

fn tanh_net(hidden_layers: usize, width: usize) -> NetworkConfig {
    NetworkConfig {
        architecture: ArchitectureConfig {
            hidden_layers,
            width,
            activation: Activation::Tanh,
            output_dim: 1,
            fourier: None,
            norm: None,
        },
        init: Initializer::fan_in(),
    }
}

fn adamw(lr: f64, schedule: ScheduleConfig) -> OptimizerConfig {
    OptimizerConfig {
        kind: OptimizerKind::Adamw { weight_decay: 0.0 },
        lr,
        schedule,
    }
}

/// Built-in experiment definitions.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let cfg = match name {
        // A/B run: StableGrad throughout at a constant rate.
        "burgers-desk" => ExperimentConfig {
            name: name.into(),
            seed: 0,
            problem: ProblemSpec::burgers(0.05),
            network: tanh_net(6, 32),
            optimizer: adamw(1e-3, ScheduleConfig::Constant),
            phases: vec![residual_std_phase(2000)],
            batch: BatchSizes { pde: 256, bc: 64, ic: 64 },
            validation: ValidationConfig {
                points: BatchSizes { pde: 8192, bc: 1024, ic: 1024 },
                every: 50,
                grid: vec![256, 101],
            },
            diagnostics: None,
            log_every: 1,
            wall_clock: false,
        },
        "burgers-diag" => {
            let mut c = preset("burgers-desk")?;
            c.name = name.into();
            c.diagnostics = Some(DiagnosticsConfig {
                every: 200,
                points: BatchSizes { pde: 160, bc: 48, ic: 48 },
                stablegrad: None,
                jacobian_cap: default_cap(),
                power_tol: default_power_tol(),
                power_max_iter: default_power_iters(),
            });
            c
        }
        // Two-phase protocol: StableGrad then plain fine-tuning.
        "poisson-desk" => ExperimentConfig {
            name: name.into(),
            seed: 0,
            problem: ProblemSpec::poisson(),
            network: tanh_net(6, 32),
            optimizer: adamw(1e-3, ScheduleConfig::CosineAnnealing),
            phases: vec![
                stablegrad_phase(1250),
                Phase {
                    steps: 1250,
                    preprocessor: Preprocessor::None,
                },
            ],
            batch: BatchSizes { pde: 256, bc: 128, ic: 0 },
            validation: ValidationConfig {
                points: BatchSizes { pde: 8192, bc: 2048, ic: 0 },
                every: 100,
                grid: vec![101],
            },
            diagnostics: None,
            log_every: 10,
            wall_clock: false,
        },
        "helmholtz-desk" => {
            let mut net = tanh_net(4, 64);
            net.architecture.activation = Activation::Silu;
            net.architecture.fourier = Some(FourierFeatures::integer(3, 12));
            ExperimentConfig {
                name: name.into(),
                seed: 0,
                problem: ProblemSpec::helmholtz(10.0 * PI, 10.0),
                network: net,
                optimizer: adamw(1e-3, ScheduleConfig::WarmupThenConstant { warmup: 100 }),
                phases: vec![
                    stablegrad_phase(1000),
                    Phase {
                        steps: 1000,
                        preprocessor: Preprocessor::None,
                    },
                ],
                batch: BatchSizes { pde: 512, bc: 256, ic: 0 },
                validation: ValidationConfig {
                    points: BatchSizes { pde: 8192, bc: 2048, ic: 0 },
                    every: 100,
                    grid: vec![41],
                },
                diagnostics: None,
                log_every: 10,
                wall_clock: false,
            }
        }
        "burgers-paper" => {
            let mut c = preset("burgers-desk")?;
            c.name = name.into();
            c.optimizer.schedule = ScheduleConfig::CosineAnnealing;
            c.phases = vec![
                stablegrad_phase(25_000),
                Phase {
                    steps: 25_000,
                    preprocessor: Preprocessor::None,
                },
            ];
            c.batch = BatchSizes { pde: 100_000, bc: 5_000, ic: 5_000 };
            c.validation.points = BatchSizes { pde: 10_000, bc: 1_000, ic: 1_000 };
            c.validation.every = 1000;
            c.log_every = 100;
            c
        }
        "poisson-paper" => {
            let mut c = preset("poisson-desk")?;
            c.name = name.into();
            c.phases = vec![
                stablegrad_phase(25_000),
                Phase {
                    steps: 25_000,
                    preprocessor: Preprocessor::None,
                },
            ];
            c.batch = BatchSizes { pde: 100_000, bc: 10_000, ic: 0 };
            c.validation.every = 1000;
            c.log_every = 100;
            c
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; available: {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(cfg)
}
