use serde::{Deserialize, Serialize};

use super::{sign_rescale, stablegrad_rescale, Optimizer, OptimizerKind, Preprocessor, ReferenceScale, Rescaled, Schedule};
use crate::diagnostics::r_std_ratio;
use crate::error::{Error, Result};
use crate::linalg::{norm2, SeededRng};
use crate::network::MlpNetwork;
use crate::residuals::{evaluate, sample_batch, BatchSizes, CollocationBatch, LossGradient, ProblemSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub steps: usize,
    #[serde(default)]
    pub preprocessor: Preprocessor,
}

/// One training step as logged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: usize,
    pub preprocessor: String,
    pub lr: f64,
    pub loss: f64,
    pub pde_loss: f64,
    pub bc_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ic_loss: Option<f64>,
    /// Block stds of the raw gradient.
    pub sigma_raw: Vec<f64>,
    /// Block stds of the gradient handed to the optimizer.
    pub sigma_scaled: Vec<f64>,
    pub r_std_raw: f64,
    pub r_std_scaled: f64,
    pub sigma_out: f64,
    pub sigma_residual: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reference_scale: Option<f64>,
    pub grad_norm: f64,
    pub update_norm: f64,
}

/// Everything a caller may need from one step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub record: StepRecord,
    pub theta_before: Vec<f64>,
    /// `θ_{t+1} − θ_t`.
    pub delta: Vec<f64>,
    pub raw: LossGradient,
    pub rescaled: Option<Rescaled>,
}

/// Single-network training loop over resampled collocation batches.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: MlpNetwork,
    pub spec: ProblemSpec,
    pub sizes: BatchSizes,
    pub schedule: Schedule,
    pub optimizer: Optimizer,
    batch_rng: SeededRng,
    fixed_batch: Option<CollocationBatch>,
    step: usize,
}

impl Trainer {
    pub fn new(
        net: MlpNetwork,
        spec: ProblemSpec,
        sizes: BatchSizes,
        optimizer: OptimizerKind,
        schedule: Schedule,
        batch_rng: SeededRng,
    ) -> Result<Self> {
        spec.validate()?;
        schedule.validate()?;
        let optimizer = Optimizer::new(optimizer, net.num_params());
        Ok(Trainer {
            net,
            spec,
            sizes,
            schedule,
            optimizer,
            batch_rng,
            fixed_batch: None,
            step: 0,
        })
    }

    /// Trains on one batch throughout instead of resampling.
    pub fn with_fixed_batch(mut self, batch: CollocationBatch) -> Self {
        self.fixed_batch = Some(batch);
        self
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, pre: &Preprocessor, phase: usize) -> Result<StepOutcome> {
        let step = self.step;
        let lr = self.schedule.lr_at(step)?;
        let batch = match &self.fixed_batch {
            Some(b) => b.clone(),
            None => sample_batch(&self.spec, self.sizes, &mut self.batch_rng)?,
        };
        let abort = |reason: String| Error::NumericAbort { step, reason };
        let ev = evaluate(&self.spec, &self.net, &batch).map_err(|e| match e {
            Error::Overflow { layer, detail } => abort(format!("overflow in layer {layer}: {detail}")),
            e => e,
        })?;
        let losses = ev.losses();
        if !losses.total.is_finite() {
            return Err(abort(format!("non-finite training loss {}", losses.total)));
        }
        let raw = ev.gradient(&self.net)?;
        if raw.grads.flat().iter().any(|v| !v.is_finite()) {
            return Err(abort("non-finite gradient".into()));
        }
        let mode = pre.block_mode();
        let (passed, rescaled) = match pre {
            Preprocessor::None => (raw.grads.clone(), None),
            Preprocessor::Sign => (sign_rescale(&raw.grads), None),
            Preprocessor::StableGrad(cfg) => {
                let sigma = match cfg.reference_scale {
                    ReferenceScale::ResidualStd => raw.sigma_residual,
                    _ => raw.sigma_out,
                };
                let r = stablegrad_rescale(&raw.grads, sigma, cfg)?;
                (r.grads.clone(), Some(r))
            }
        };
        let sigma_raw = raw.grads.block_stds(mode);
        let sigma_scaled = passed.block_stds(mode);

        let theta_before = self.net.flat_params();
        let mut theta = theta_before.clone();
        self.optimizer.step(&mut theta, passed.flat(), lr)?;
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(abort("non-finite parameters after update".into()));
        }
        self.net.set_flat_params(&theta)?;
        let delta: Vec<f64> = theta.iter().zip(&theta_before).map(|(a, b)| a - b).collect();
        self.step += 1;

        let record = StepRecord {
            step,
            phase,
            preprocessor: pre.name().to_string(),
            lr,
            loss: losses.total,
            pde_loss: losses.pde,
            bc_loss: losses.bc,
            ic_loss: losses.ic,
            r_std_raw: r_std_ratio(&sigma_raw),
            r_std_scaled: r_std_ratio(&sigma_scaled),
            sigma_raw,
            sigma_scaled,
            sigma_out: raw.sigma_out,
            sigma_residual: raw.sigma_residual,
            reference_scale: rescaled.as_ref().map(|r| r.reference),
            grad_norm: norm2(raw.grads.flat()),
            update_norm: norm2(&delta),
        };
        Ok(StepOutcome {
            record,
            theta_before,
            delta,
            raw,
            rescaled,
        })
    }
}

/// Runs `steps` steps with one preprocessor and returns their records.
pub fn train_phase(trainer: &mut Trainer, pre: &Preprocessor, steps: usize, phase: usize) -> Result<Vec<StepRecord>> {
    (0..steps).map(|_| trainer.step(pre, phase).map(|o| o.record)).collect()
}
