//! Residual Jacobians, effective kernels and the local-decrease margin.
//!
//! With `L = ½‖r‖²` and `J = ∂r/∂θ` split into parameter blocks
//! `J = [J₁, …, J_L]`, a gradient step evolves the residual through
//! `K = JJᵀ` and a block-rescaled step through `K_SG = JPJᵀ = Σ α_ℓ J_ℓJ_ℓᵀ`
//! with `P = diag(α_ℓ I_ℓ)`. Everything here is matrix-free in the kernels:
//! only `J` is stored.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm2, norm2_sq, power_iteration, symmetric_eigenvalues, DenseMatrix, DenseVector, PowerIterationConfig, SeededRng};
use crate::network::{BlockMode, MlpNetwork};
use crate::optim::{stablegrad_rescale, ReferenceScale, StableGradConfig};
use crate::residuals::{evaluate, CollocationBatch, ProblemSpec};

/// Default limit on `rows × parameters` of an assembled Jacobian.
pub const DEFAULT_JACOBIAN_CAP: usize = 20_000_000;

/// Max over min of the block stds; infinite when some block has zero std.
pub fn r_std_ratio(sigmas: &[f64]) -> f64 {
    let max = sigmas.iter().cloned().fold(0.0f64, f64::max);
    let min = sigmas.iter().cloned().fold(f64::INFINITY, f64::min);
    if sigmas.is_empty() {
        return 1.0;
    }
    if min == 0.0 {
        return f64::INFINITY;
    }
    max / min
}

/// Dense residual Jacobian with its residual and block partition.
#[derive(Clone, Debug)]
pub struct JacobianBlocks {
    pub jacobian: DenseMatrix,
    pub residual: DenseVector,
    pub blocks: Vec<Range<usize>>,
}

impl JacobianBlocks {
    pub fn new(jacobian: DenseMatrix, residual: DenseVector, blocks: Vec<Range<usize>>) -> Result<Self> {
        if jacobian.rows() != residual.len() {
            return Err(Error::shape("Jacobian rows", residual.len(), jacobian.rows()));
        }
        let covered = blocks.last().map_or(0, |b| b.end);
        let contiguous = blocks.first().is_none_or(|b| b.start == 0) && blocks.windows(2).all(|w| w[0].end == w[1].start);
        if covered != jacobian.cols() || !contiguous {
            return Err(Error::Contract("blocks must partition the Jacobian columns".into()));
        }
        Ok(JacobianBlocks {
            jacobian,
            residual,
            blocks,
        })
    }

    /// `J_ℓ` as a dense matrix.
    pub fn block(&self, l: usize) -> DenseMatrix {
        let r = &self.blocks[l];
        let j = &self.jacobian;
        DenseMatrix::from_fn(j.rows(), r.len(), |i, c| j[(i, r.start + c)])
    }

    /// `g = Jᵀr`.
    pub fn gradient(&self) -> DenseVector {
        self.jacobian.matvec_transposed(&self.residual).expect("shapes checked at construction")
    }

    pub fn block_sq_norms(&self) -> Vec<f64> {
        let g = self.gradient();
        self.blocks.iter().map(|r| norm2_sq(&g[r.clone()])).collect()
    }
}

/// Assembles `J` on `batch`, refusing instances above `cap` entries.
pub fn assemble_jacobian(
    net: &MlpNetwork,
    spec: &ProblemSpec,
    batch: &CollocationBatch,
    mode: BlockMode,
    cap: usize,
) -> Result<JacobianBlocks> {
    let rows = batch.pde_points.rows() + batch.bc_points.rows() + batch.ic.as_ref().map_or(0, |(p, _)| p.rows());
    let entries = rows.saturating_mul(net.num_params());
    if entries > cap {
        return Err(Error::Config(format!(
            "diagnostic Jacobian would hold {entries} entries ({rows} rows x {} parameters), above the cap of {cap}; \
             use a smaller diagnostic batch",
            net.num_params()
        )));
    }
    let ev = evaluate(spec, net, batch)?;
    let j = ev.jacobian(net)?;
    JacobianBlocks::new(j, ev.residual.entries, net.param_layout().blocks(mode))
}

/// Block factors `α_ℓ` of the preconditioner `P`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaBlocks {
    pub alphas: Vec<f64>,
    pub blocks: Vec<Range<usize>>,
}

impl AlphaBlocks {
    pub fn new(alphas: Vec<f64>, blocks: Vec<Range<usize>>) -> Result<Self> {
        if alphas.len() != blocks.len() {
            return Err(Error::shape("alpha blocks", blocks.len(), alphas.len()));
        }
        if alphas.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(Error::Domain("block factors must be finite and positive".into()));
        }
        Ok(AlphaBlocks { alphas, blocks })
    }

    pub fn uniform(alpha: f64, blocks: Vec<Range<usize>>) -> Result<Self> {
        Self::new(vec![alpha; blocks.len()], blocks)
    }

    /// `v ← P v`.
    pub fn apply(&self, v: &mut [f64]) {
        for (r, a) in self.blocks.iter().zip(&self.alphas) {
            for x in &mut v[r.clone()] {
                *x *= a;
            }
        }
    }

    /// `diag(P)`.
    pub fn diagonal(&self) -> Vec<f64> {
        let n = self.blocks.last().map_or(0, |r| r.end);
        let mut d = vec![1.0; n];
        self.apply(&mut d);
        d
    }
}

fn check_residual(r: &[f64]) -> Result<f64> {
    let rr = norm2_sq(r);
    if rr == 0.0 {
        return Err(Error::Domain("Rayleigh quotient of a zero residual".into()));
    }
    Ok(rr)
}

/// `rᵀAr/‖r‖²` for a dense symmetric `A`.
pub fn rayleigh_dense(a: &DenseMatrix, r: &[f64]) -> Result<f64> {
    let rr = check_residual(r)?;
    Ok(dot(r, &a.matvec(r)?)? / rr)
}

/// `ρ = ‖Jᵀr‖²/‖r‖²`, summed block by block so that `α ≡ 1` reproduces
/// [`rayleigh_ksg`] bit for bit.
pub fn rayleigh_k(jb: &JacobianBlocks) -> Result<f64> {
    let rr = check_residual(&jb.residual)?;
    Ok(jb.block_sq_norms().iter().sum::<f64>() / rr)
}

/// `ρ_SG = Σ α_ℓ‖g^ℓ‖²/‖r‖²`.
pub fn rayleigh_ksg(jb: &JacobianBlocks, alpha: &AlphaBlocks) -> Result<f64> {
    let rr = check_residual(&jb.residual)?;
    let sq = jb.block_sq_norms();
    Ok(sq.iter().zip(&alpha.alphas).map(|(q, a)| a * q).sum::<f64>() / rr)
}

/// `λ_max(JPJᵀ)` by power iteration on `v ↦ J(P(Jᵀv))`.
pub fn lambda_max_ksg(
    jb: &JacobianBlocks,
    alpha: &AlphaBlocks,
    cfg: &PowerIterationConfig,
    rng: &mut SeededRng,
) -> Result<f64> {
    let j = &jb.jacobian;
    let apply = |v: &[f64], out: &mut [f64]| {
        let mut w = j.matvec_transposed(v).expect("operator dims").into_vec();
        alpha.apply(&mut w);
        out.copy_from_slice(&j.matvec(&w).expect("operator dims"));
    };
    Ok(power_iteration(apply, j.rows(), *cfg, rng)?.value)
}

/// `λ_max(JJᵀ)`.
pub fn lambda_max_k(jb: &JacobianBlocks, cfg: &PowerIterationConfig, rng: &mut SeededRng) -> Result<f64> {
    let ones = AlphaBlocks {
        alphas: vec![1.0; jb.blocks.len()],
        blocks: jb.blocks.clone(),
    };
    lambda_max_ksg(jb, &ones, cfg, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Margin {
    pub s_sg: f64,
    pub margin: f64,
}

/// `s = η λ_max(K_SG)` and `M = ρ_SG (1 − s/2) − ρ`.
pub fn theorem_margin(rho: f64, rho_sg: f64, lambda_max_ksg: f64, eta: f64) -> Margin {
    let s_sg = eta * lambda_max_ksg;
    Margin {
        s_sg,
        margin: rho_sg * (1.0 - 0.5 * s_sg) - rho,
    }
}

/// `‖r(θ+Δ) − r(θ) − JΔ‖ / (‖r(θ+Δ) − r(θ)‖ + ε)` on `batch`.
pub fn linearization_error(net: &MlpNetwork, spec: &ProblemSpec, batch: &CollocationBatch, delta: &[f64]) -> Result<f64> {
    const EPS: f64 = 1e-12;
    let theta = net.flat_params();
    if delta.len() != theta.len() {
        return Err(Error::shape("linearization_error delta", theta.len(), delta.len()));
    }
    let ev = evaluate(spec, net, batch)?;
    let jd = ev.jacobian(net)?.matvec(delta)?;
    let mut moved = net.clone();
    let shifted: Vec<f64> = theta.iter().zip(delta).map(|(t, d)| t + d).collect();
    moved.set_flat_params(&shifted)?;
    let r1 = evaluate(spec, &moved, batch)?.residual.entries;
    let r0 = &ev.residual.entries;
    let change: Vec<f64> = r1.iter().zip(r0.iter()).map(|(a, b)| a - b).collect();
    let miss: Vec<f64> = change.iter().zip(jd.iter()).map(|(c, j)| c - j).collect();
    Ok(norm2(&miss) / (norm2(&change) + EPS))
}

/// Exact one-step decreases of `½‖r‖²` for the linear model
/// `r⁺ = r − ηAr` with `A = K` and `A = K_SG`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DecreaseCheck {
    pub delta_std: f64,
    pub delta_sg: f64,
    pub rho: f64,
    pub rho_sg: f64,
    pub s_sg: f64,
    pub margin: f64,
    /// `s_SG < 2` and `M > 0`.
    pub theorem_holds: bool,
    /// `Δ_SG > Δ_std`.
    pub decrease_holds: bool,
}

/// `Δ_A = η rᵀAr − (η²/2)‖Ar‖²` for both kernels, whose ingredients are
/// assembled densely; `λ_max(K_SG)` comes from a full symmetric
/// eigendecomposition.
pub fn local_decrease_check(
    j: &DenseMatrix,
    alpha: &AlphaBlocks,
    r: &[f64],
    eta: f64,
) -> Result<DecreaseCheck> {
    let d = alpha.diagonal();
    if d.len() != j.cols() {
        return Err(Error::shape("local_decrease_check blocks", j.cols(), d.len()));
    }
    let jt = j.transpose();
    let k = j.matmul(&jt)?;
    let mut jp = j.clone();
    for i in 0..jp.rows() {
        for (x, a) in jp.row_mut(i).iter_mut().zip(&d) {
            *x *= a;
        }
    }
    let ksg = jp.matmul(&jt)?;
    let decrease = |a: &DenseMatrix| -> Result<f64> {
        let ar = a.matvec(r)?;
        Ok(eta * dot(r, &ar)? - 0.5 * eta * eta * norm2_sq(&ar))
    };
    let delta_std = decrease(&k)?;
    let delta_sg = decrease(&ksg)?;
    let rho = rayleigh_dense(&k, r)?;
    let rho_sg = rayleigh_dense(&ksg, r)?;
    let lam = symmetric_eigenvalues(&ksg)?.last().copied().unwrap_or(0.0);
    let m = theorem_margin(rho, rho_sg, lam, eta);
    Ok(DecreaseCheck {
        delta_std,
        delta_sg,
        rho,
        rho_sg,
        s_sg: m.s_sg,
        margin: m.margin,
        theorem_holds: m.s_sg < 2.0 && m.margin > 0.0,
        decrease_holds: delta_sg > delta_std,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateGeometry {
    /// Max over min of `‖Δθ^ℓ‖/‖θ^ℓ‖` across blocks with `‖θ^ℓ‖ ≥ floor`.
    pub valid_relative_update_ratio: f64,
    /// `max_ℓ ‖Δθ^ℓ‖² / Σ_ℓ ‖Δθ^ℓ‖²`.
    pub max_energy_concentration: f64,
    pub valid_blocks: usize,
}

pub const VALID_BLOCK_FLOOR: f64 = 1e-8;

pub fn update_geometry(theta: &[f64], delta: &[f64], blocks: &[Range<usize>], floor: f64) -> Result<UpdateGeometry> {
    if theta.len() != delta.len() {
        return Err(Error::shape("update_geometry delta", theta.len(), delta.len()));
    }
    let mut ratios = Vec::new();
    let mut energy = Vec::new();
    for r in blocks {
        let dn = norm2(&delta[r.clone()]);
        let tn = norm2(&theta[r.clone()]);
        energy.push(dn * dn);
        if tn >= floor {
            ratios.push(dn / tn);
        }
    }
    if ratios.is_empty() {
        return Err(Error::Domain("no parameter block is above the validity floor".into()));
    }
    let total: f64 = energy.iter().sum();
    let max_e = energy.iter().cloned().fold(0.0, f64::max);
    let rmax = ratios.iter().cloned().fold(0.0, f64::max);
    let rmin = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(UpdateGeometry {
        valid_relative_update_ratio: if rmin > 0.0 { rmax / rmin } else { f64::INFINITY },
        max_energy_concentration: if total > 0.0 { max_e / total } else { 0.0 },
        valid_blocks: ratios.len(),
    })
}

/// One checkpoint of kernel diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelDiagnostics {
    pub epoch: usize,
    pub rho: f64,
    pub rho_sg: f64,
    pub lambda_max_k: f64,
    pub lambda_max_ksg: f64,
    pub s_sg: f64,
    pub margin_sg: f64,
    #[serde(default)]
    pub e_lin: Option<f64>,
    pub r_std_raw: f64,
    pub r_std_scaled: f64,
    pub residual_loss: f64,
}

/// Inputs shared by every checkpoint of a run.
#[derive(Clone, Debug)]
pub struct DiagnosticSetup {
    pub spec: ProblemSpec,
    pub batch: CollocationBatch,
    pub stablegrad: StableGradConfig,
    pub power: PowerIterationConfig,
    pub cap: usize,
}

impl DiagnosticSetup {
    /// Diagnostics of `net` on the fixed batch at step `epoch` with step
    /// size `eta`. `delta`, when given, is the update realized from `net`
    /// and feeds the linearization error.
    pub fn measure(
        &self,
        net: &MlpNetwork,
        epoch: usize,
        eta: f64,
        delta: Option<&[f64]>,
        rng: &mut SeededRng,
    ) -> Result<KernelDiagnostics> {
        let jb = assemble_jacobian(net, &self.spec, &self.batch, self.stablegrad.block_mode, self.cap)?;
        let ev = evaluate(&self.spec, net, &self.batch)?;
        let grad = ev.gradient(net)?;
        let sigma = match self.stablegrad.reference_scale {
            ReferenceScale::ResidualStd => grad.sigma_residual,
            _ => grad.sigma_out,
        };
        let rescaled = stablegrad_rescale(&grad.grads, sigma, &self.stablegrad)?;
        let alpha = AlphaBlocks::new(rescaled.alphas.clone(), jb.blocks.clone())?;
        let rho = rayleigh_k(&jb)?;
        let rho_sg = rayleigh_ksg(&jb, &alpha)?;
        let lambda_max_k = lambda_max_k(&jb, &self.power, rng)?;
        let lambda_max_ksg = lambda_max_ksg(&jb, &alpha, &self.power, rng)?;
        let m = theorem_margin(rho, rho_sg, lambda_max_ksg, eta);
        let e_lin = delta
            .map(|d| linearization_error(net, &self.spec, &self.batch, d))
            .transpose()?;
        Ok(KernelDiagnostics {
            epoch,
            rho,
            rho_sg,
            lambda_max_k,
            lambda_max_ksg,
            s_sg: m.s_sg,
            margin_sg: m.margin,
            e_lin,
            r_std_raw: r_std_ratio(&rescaled.sigmas),
            r_std_scaled: r_std_ratio(&rescaled.grads.block_stds(self.stablegrad.block_mode)),
            residual_loss: ev.residual.loss(),
        })
    }
}
