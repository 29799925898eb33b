//! Gradient preprocessors, optimizer steps and learning-rate schedules.

mod schedule;
mod train;

use serde::{Deserialize, Serialize};

pub use schedule::{LrSchedule, MultiplierTable, Schedule, TABLE3_MULTIPLIERS};
pub use train::{train_phase, Phase, StepOutcome, StepRecord, Trainer};

use crate::error::{Error, Result};
use crate::linalg::norm2_sq;
use crate::network::{BlockMode, GradientBlocks};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceScale {
    /// `c = std(∂L/∂u)` over the value channel.
    #[default]
    OutputAdjoint,
    /// `c = std(r)`.
    ResidualStd,
    /// `c` chosen so that `‖g̃‖ = ‖g‖`.
    NormPreserving,
    /// `c` chosen so that `gᵀg̃ = gᵀg`.
    InnerProductPreserving,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StableGradConfig {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub reference_scale: ReferenceScale,
    #[serde(default)]
    pub block_mode: BlockMode,
}

fn default_epsilon() -> f64 {
    1e-12
}

impl Default for StableGradConfig {
    fn default() -> Self {
        StableGradConfig {
            epsilon: default_epsilon(),
            reference_scale: ReferenceScale::OutputAdjoint,
            block_mode: BlockMode::PerLayerJoint,
        }
    }
}

impl StableGradConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon > 0.0 && self.epsilon.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("StableGrad epsilon must be positive, got {}", self.epsilon)))
        }
    }
}

/// Output of [`stablegrad_rescale`].
#[derive(Clone, Debug)]
pub struct Rescaled {
    pub grads: GradientBlocks,
    /// Per-block factors `α_ℓ = c / (σ_ℓ + ε)`.
    pub alphas: Vec<f64>,
    /// Raw block stds `σ_ℓ`.
    pub sigmas: Vec<f64>,
    /// The reference scale `c` actually used.
    pub reference: f64,
}

/// Multiplies each block by `c / (σ_ℓ + ε)`.
///
/// `sigma` is the reference scale for [`ReferenceScale::OutputAdjoint`] and
/// [`ReferenceScale::ResidualStd`]; the preserving variants derive `c` from
/// the gradient and ignore it.
pub fn stablegrad_rescale(grads: &GradientBlocks, sigma: f64, cfg: &StableGradConfig) -> Result<Rescaled> {
    cfg.validate()?;
    let ranges = grads.block_ranges(cfg.block_mode);
    for (i, r) in ranges.iter().enumerate() {
        if grads.block(r.clone()).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { block: i });
        }
    }
    let sigmas = grads.block_stds(cfg.block_mode);
    let eps = cfg.epsilon;
    let sq: Vec<f64> = ranges.iter().map(|r| norm2_sq(grads.block(r.clone()))).collect();
    let total: f64 = sq.iter().sum();
    let reference = match cfg.reference_scale {
        ReferenceScale::OutputAdjoint | ReferenceScale::ResidualStd => {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::Domain(format!("reference scale must be finite and non-negative, got {sigma}")));
            }
            sigma
        }
        ReferenceScale::NormPreserving => {
            let den: f64 = sq.iter().zip(&sigmas).map(|(q, s)| q / ((s + eps) * (s + eps))).sum();
            if den > 0.0 { (total / den).sqrt() } else { 0.0 }
        }
        ReferenceScale::InnerProductPreserving => {
            let den: f64 = sq.iter().zip(&sigmas).map(|(q, s)| q / (s + eps)).sum();
            if den > 0.0 { total / den } else { 0.0 }
        }
    };
    let alphas: Vec<f64> = sigmas.iter().map(|s| reference / (s + eps)).collect();
    let mut out = grads.flat().to_vec();
    for (r, a) in ranges.iter().zip(&alphas) {
        for v in &mut out[r.clone()] {
            *v *= a;
        }
    }
    Ok(Rescaled {
        grads: grads.with_values(out)?,
        alphas,
        sigmas,
        reference,
    })
}

/// Element-wise sign, with `sign(0) = 0`.
pub fn sign_rescale(grads: &GradientBlocks) -> GradientBlocks {
    let v = grads
        .flat()
        .iter()
        .map(|&g| if g > 0.0 { 1.0 } else if g < 0.0 { -1.0 } else { 0.0 })
        .collect();
    grads.with_values(v).expect("same length")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Preprocessor {
    #[default]
    None,
    #[serde(rename = "stablegrad")]
    StableGrad(StableGradConfig),
    Sign,
}

impl Preprocessor {
    pub fn name(&self) -> &'static str {
        match self {
            Preprocessor::None => "none",
            Preprocessor::StableGrad(_) => "stablegrad",
            Preprocessor::Sign => "sign",
        }
    }

    pub fn block_mode(&self) -> BlockMode {
        match self {
            Preprocessor::StableGrad(c) => c.block_mode,
            _ => BlockMode::PerLayerJoint,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWState {
    pub fn new(num_params: usize, weight_decay: f64) -> Self {
        AdamWState {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Bias-corrected Adam moments with decoupled weight decay:
/// `θ ← θ − η·wd·θ − η·m̂/(√v̂ + eps)`.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamWState, lr: f64) -> Result<()> {
    let n = params.len();
    if grads.len() != n {
        return Err(Error::shape("adamw_step gradient", n, grads.len()));
    }
    if state.m.len() != n || state.v.len() != n {
        return Err(Error::shape("adamw_step state", n, state.m.len()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..n {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= lr * state.weight_decay * params[i];
        params[i] -= lr * mh / (vh.sqrt() + state.eps);
    }
    Ok(())
}

/// `θ ← θ − η g`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    crate::linalg::axpy(-lr, grads, params)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adamw {
        #[serde(default)]
        weight_decay: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Sgd,
    AdamW(AdamWState),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, num_params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adamw { weight_decay } => Optimizer::AdamW(AdamWState::new(num_params, weight_decay)),
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        match self {
            Optimizer::Sgd => sgd_step(params, grads, lr),
            Optimizer::AdamW(s) => adamw_step(params, grads, s, lr),
        }
    }
}
