//! Benchmark PDE residuals.
//!
//! Every problem is assembled into one weighted residual vector `r(θ)` with
//! `L(θ) = ½‖r(θ)‖²`: an entry from block `X` with `N_X` points is
//! `√(λ_X / N_X) · res`, so `½‖r‖² = Σ_X λ_X · L_X` with the component loss
//! `L_X = ½ · mean(res²)`.
//!
//! Each entry depends on the output channels of a single point, so the
//! evaluation keeps, per point, the sensitivity of its entry to those
//! channels. Contracting the sensitivities with `r` gives the adjoint of the
//! loss; feeding them in directly gives Jacobian rows.

mod reference;

use std::f64::consts::PI;
use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use reference::{
    burgers_cole_hopf, burgers_mol, burgers_reference, relative_l2, FieldHeader, FieldKind, MolConfig,
    ReferenceField,
};

use crate::error::{Error, Result};
use crate::linalg::{empirical_std, norm2_sq, DenseMatrix, DenseVector, SeededRng};
use crate::network::{Channel, DerivativeOrder, DerivativeTrace, GradientBlocks, MlpNetwork, OutputAdjoint};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub pde: f64,
    pub bc: f64,
    #[serde(default)]
    pub ic: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pde {
    /// `u_t + u u_x = ν u_xx` on `[-1,1] × [0,1]`, `u(x,0) = −sin(πx)`,
    /// `u(±1,t) = 0`. Coordinates `(x, t)`.
    Burgers1d { nu: f64 },
    /// `Δu = f` on `[0,1]²` with `u* = sin(πx) sin(πy)`, `f = −2π² u*`.
    Poisson2d,
    /// `Δu + k²u = q` on `[0,1]³` with
    /// `u* = sin(mπx) sin(mπy) sin(mπz)` and `q = (k² − 3m²π²) u*`.
    Helmholtz3d {
        k: f64,
        m: f64,
        /// Divide the PDE residual by `k²`.
        #[serde(default = "yes")]
        normalize: bool,
    },
}

fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub pde: Pde,
    pub weights: LossWeights,
}

impl ProblemSpec {
    pub fn burgers(nu: f64) -> Self {
        ProblemSpec {
            pde: Pde::Burgers1d { nu },
            weights: LossWeights {
                pde: 1.0,
                bc: 10.0,
                ic: 10.0,
            },
        }
    }

    pub fn poisson() -> Self {
        ProblemSpec {
            pde: Pde::Poisson2d,
            weights: LossWeights {
                pde: 1.0,
                bc: 100.0,
                ic: 0.0,
            },
        }
    }

    pub fn helmholtz(k: f64, m: f64) -> Self {
        ProblemSpec {
            pde: Pde::Helmholtz3d { k, m, normalize: true },
            weights: LossWeights {
                pde: 1.0,
                bc: 100.0,
                ic: 0.0,
            },
        }
    }

    pub fn coords(&self) -> usize {
        match self.pde {
            Pde::Burgers1d { .. } | Pde::Poisson2d => 2,
            Pde::Helmholtz3d { .. } => 3,
        }
    }

    pub fn has_ic(&self) -> bool {
        matches!(self.pde, Pde::Burgers1d { .. })
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        match self.pde {
            Pde::Burgers1d { .. } => vec![(-1.0, 1.0), (0.0, 1.0)],
            Pde::Poisson2d => vec![(0.0, 1.0); 2],
            Pde::Helmholtz3d { .. } => vec![(0.0, 1.0); 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weights;
        if !(w.pde > 0.0 && w.bc > 0.0) || (self.has_ic() && !(w.ic > 0.0)) {
            return Err(Error::Config("loss weights must be positive for every present block".into()));
        }
        match self.pde {
            Pde::Burgers1d { nu } if !(nu > 0.0) => Err(Error::Config(format!("viscosity must be positive, got {nu}"))),
            Pde::Helmholtz3d { k, m, .. } if !(k > 0.0 && m > 0.0) => {
                Err(Error::Config(format!("Helmholtz k and m must be positive, got k={k}, m={m}")))
            }
            _ => Ok(()),
        }
    }

    /// Closed-form solution where one exists (Poisson, Helmholtz).
    pub fn exact(&self, x: &[f64]) -> Option<f64> {
        match self.pde {
            Pde::Burgers1d { .. } => None,
            Pde::Poisson2d => Some((PI * x[0]).sin() * (PI * x[1]).sin()),
            Pde::Helmholtz3d { m, .. } => Some(x.iter().map(|&xi| (m * PI * xi).sin()).product()),
        }
    }

    fn boundary_target(&self, x: &[f64]) -> f64 {
        self.exact(x).unwrap_or(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSizes {
    pub pde: usize,
    pub bc: usize,
    #[serde(default)]
    pub ic: usize,
}

/// Collocation points (one per row) and the targets of the boundary and
/// initial blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct CollocationBatch {
    pub pde_points: DenseMatrix,
    pub bc_points: DenseMatrix,
    pub bc_targets: Vec<f64>,
    pub ic: Option<(DenseMatrix, Vec<f64>)>,
}

/// Uniform samples: interior points in the domain, boundary points on a
/// uniformly chosen face, initial points at `t = 0`.
pub fn sample_batch(spec: &ProblemSpec, sizes: BatchSizes, rng: &mut SeededRng) -> Result<CollocationBatch> {
    if sizes.pde == 0 || sizes.bc == 0 || (spec.has_ic() && sizes.ic == 0) {
        return Err(Error::Config("every residual block needs at least one point".into()));
    }
    let bounds = spec.bounds();
    let d = bounds.len();
    let pde_points = DenseMatrix::from_fn(sizes.pde, d, |_, j| rng.uniform(bounds[j].0, bounds[j].1));
    let mut bc_points = DenseMatrix::zeros(sizes.bc, d);
    for b in 0..sizes.bc {
        match spec.pde {
            Pde::Burgers1d { .. } => {
                bc_points[(b, 0)] = if rng.below(2) == 0 { -1.0 } else { 1.0 };
                bc_points[(b, 1)] = rng.uniform(0.0, 1.0);
            }
            _ => {
                let face = rng.below(2 * d);
                let (axis, side) = (face / 2, face % 2);
                for j in 0..d {
                    bc_points[(b, j)] = if j == axis {
                        if side == 0 { bounds[j].0 } else { bounds[j].1 }
                    } else {
                        rng.uniform(bounds[j].0, bounds[j].1)
                    };
                }
            }
        }
    }
    let bc_targets = (0..sizes.bc).map(|b| spec.boundary_target(bc_points.row(b))).collect();
    let ic = spec.has_ic().then(|| {
        let pts = DenseMatrix::from_fn(sizes.ic, 2, |_, j| if j == 0 { rng.uniform(-1.0, 1.0) } else { 0.0 });
        let targets = (0..sizes.ic).map(|b| -(PI * pts[(b, 0)]).sin()).collect();
        (pts, targets)
    });
    Ok(CollocationBatch {
        pde_points,
        bc_points,
        bc_targets,
        ic,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualBlock {
    Pde,
    Bc,
    Ic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualVector {
    pub entries: DenseVector,
    pub labels: Vec<ResidualBlock>,
    pub weights: LossWeights,
}

impl ResidualVector {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `½‖r‖²`.
    pub fn loss(&self) -> f64 {
        0.5 * norm2_sq(&self.entries)
    }

    fn weight(&self, block: ResidualBlock) -> f64 {
        match block {
            ResidualBlock::Pde => self.weights.pde,
            ResidualBlock::Bc => self.weights.bc,
            ResidualBlock::Ic => self.weights.ic,
        }
    }

    /// Unweighted `L_X = ½ mean(res²)` over the block, or `None` when the
    /// block is absent.
    pub fn component_loss(&self, block: ResidualBlock) -> Option<f64> {
        let sq: f64 = self
            .entries
            .iter()
            .zip(&self.labels)
            .filter(|(_, l)| **l == block)
            .map(|(e, _)| e * e)
            .sum();
        let present = self.labels.contains(&block);
        present.then(|| 0.5 * sq / self.weight(block))
    }

    pub fn std(&self) -> Result<f64> {
        empirical_std(&self.entries)
    }
}

/// Component losses of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentLosses {
    pub total: f64,
    pub pde: f64,
    pub bc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ic: Option<f64>,
}

#[derive(Clone, Debug)]
struct GroupEval {
    range: Range<usize>,
    trace: DerivativeTrace,
    /// `∂r_b/∂(channel of point b)` for the group's points.
    sens: OutputAdjoint,
}

/// A residual vector together with everything needed to differentiate it.
#[derive(Clone, Debug)]
pub struct ResidualEval {
    pub residual: ResidualVector,
    groups: Vec<GroupEval>,
}

/// Gradient of `½‖r‖²` and the scales used by the rescaling rule.
#[derive(Clone, Debug)]
pub struct LossGradient {
    pub grads: GradientBlocks,
    /// std of `∂L/∂u` over all points of all blocks.
    pub sigma_out: f64,
    /// std of the entries of `r`.
    pub sigma_residual: f64,
}

impl ResidualEval {
    pub fn losses(&self) -> ComponentLosses {
        let r = &self.residual;
        ComponentLosses {
            total: r.loss(),
            pde: r.component_loss(ResidualBlock::Pde).unwrap_or(0.0),
            bc: r.component_loss(ResidualBlock::Bc).unwrap_or(0.0),
            ic: r.component_loss(ResidualBlock::Ic),
        }
    }

    pub fn gradient(&self, net: &MlpNetwork) -> Result<LossGradient> {
        let mut total = GradientBlocks::zeros(net.param_layout());
        let mut value_adjoints = Vec::new();
        let r = &self.residual.entries;
        for g in &self.groups {
            let mut adj = g.sens.clone();
            let layout = *adj.layout();
            let channels = channel_list(&layout);
            for b in 0..layout.points {
                let rb = r[g.range.start + b];
                for &ch in &channels {
                    let s = adj.get(ch, b, 0);
                    if s != 0.0 {
                        adj.set(ch, b, 0, s * rb);
                    }
                }
            }
            value_adjoints.extend(adj.value_entries());
            let back = net.backward(&g.trace, &adj)?;
            total.add_assign(&back.grads)?;
        }
        Ok(LossGradient {
            grads: total,
            sigma_out: empirical_std(&value_adjoints)?,
            sigma_residual: self.residual.std()?,
        })
    }

    /// Dense `J = ∂r/∂θ`, one row per residual entry.
    pub fn jacobian(&self, net: &MlpNetwork) -> Result<DenseMatrix> {
        let p = net.num_params();
        let mut j = DenseMatrix::zeros(self.residual.len(), p);
        for g in &self.groups {
            let rows = net.backward_rows(&g.trace, &g.sens)?;
            for b in 0..rows.rows() {
                j.row_mut(g.range.start + b).copy_from_slice(rows.row(b));
            }
        }
        Ok(j)
    }
}

fn channel_list(layout: &crate::network::ChannelLayout) -> Vec<Channel> {
    let mut out = vec![Channel::Value];
    for i in 0..layout.coords {
        if layout.order.has_first() {
            out.push(Channel::First(i));
        }
        if layout.order.has_second() {
            out.push(Channel::Second(i));
        }
    }
    out
}

/// Pointwise residual operators, shared by the assembly and by callers that
/// evaluate them on fields other than networks.
pub mod pointwise {
    use std::f64::consts::PI;

    pub fn burgers(u: f64, u_x: f64, u_t: f64, u_xx: f64, nu: f64) -> f64 {
        u_t + u * u_x - nu * u_xx
    }

    pub fn poisson_source(x: f64, y: f64) -> f64 {
        -2.0 * PI * PI * (PI * x).sin() * (PI * y).sin()
    }

    pub fn helmholtz_source(x: &[f64], k: f64, m: f64) -> f64 {
        let u: f64 = x.iter().map(|&xi| (m * PI * xi).sin()).product();
        (k * k - 3.0 * m * m * PI * PI) * u
    }
}

/// Builds the residual vector (order PDE, BC, IC) and its sensitivities.
pub fn evaluate(spec: &ProblemSpec, net: &MlpNetwork, batch: &CollocationBatch) -> Result<ResidualEval> {
    if net.coords() != spec.coords() || net.output_dim() != 1 {
        return Err(Error::Contract(format!(
            "problem needs a {}-input scalar network, got {} inputs and {} outputs",
            spec.coords(),
            net.coords(),
            net.output_dim()
        )));
    }
    let w = spec.weights;
    let mut entries = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();

    // interior
    let pts = &batch.pde_points;
    let n = pts.rows();
    let trace = net.forward(pts, DerivativeOrder::Second)?;
    let mut sens = OutputAdjoint::zeros(*trace.layout(), 1);
    let s = (w.pde / n as f64).sqrt();
    let start = entries.len();
    for b in 0..n {
        let x = pts.row(b);
        let res = match spec.pde {
            Pde::Burgers1d { nu } => {
                let (u, ux, ut, uxx) = (trace.value(b), trace.first(0, b), trace.first(1, b), trace.second(0, b));
                sens.set(Channel::Value, b, 0, s * ux);
                sens.set(Channel::First(0), b, 0, s * u);
                sens.set(Channel::First(1), b, 0, s);
                sens.set(Channel::Second(0), b, 0, -s * nu);
                pointwise::burgers(u, ux, ut, uxx, nu)
            }
            Pde::Poisson2d => {
                sens.set(Channel::Second(0), b, 0, s);
                sens.set(Channel::Second(1), b, 0, s);
                trace.second(0, b) + trace.second(1, b) - pointwise::poisson_source(x[0], x[1])
            }
            Pde::Helmholtz3d { k, m, normalize } => {
                let scale = if normalize { 1.0 / (k * k) } else { 1.0 };
                let lap: f64 = (0..3).map(|i| trace.second(i, b)).sum();
                for i in 0..3 {
                    sens.set(Channel::Second(i), b, 0, s * scale);
                }
                sens.set(Channel::Value, b, 0, s * scale * k * k);
                scale * (lap + k * k * trace.value(b) - pointwise::helmholtz_source(x, k, m))
            }
        };
        entries.push(s * res);
        labels.push(ResidualBlock::Pde);
    }
    groups.push(GroupEval {
        range: start..entries.len(),
        trace,
        sens,
    });

    let mut data_block = |pts: &DenseMatrix, targets: &[f64], lambda: f64, label| -> Result<()> {
        let n = pts.rows();
        if targets.len() != n {
            return Err(Error::shape("residual targets", n, targets.len()));
        }
        let trace = net.forward(pts, DerivativeOrder::Value)?;
        let mut sens = OutputAdjoint::zeros(*trace.layout(), 1);
        let s = (lambda / n as f64).sqrt();
        let start = entries.len();
        for (b, &target) in targets.iter().enumerate() {
            sens.set(Channel::Value, b, 0, s);
            entries.push(s * (trace.value(b) - target));
            labels.push(label);
        }
        groups.push(GroupEval {
            range: start..entries.len(),
            trace,
            sens,
        });
        Ok(())
    };
    data_block(&batch.bc_points, &batch.bc_targets, w.bc, ResidualBlock::Bc)?;
    if spec.has_ic() {
        let (pts, targets) = batch
            .ic
            .as_ref()
            .ok_or_else(|| Error::Contract("Burgers batch is missing initial-condition points".into()))?;
        data_block(pts, targets, w.ic, ResidualBlock::Ic)?;
    }

    Ok(ResidualEval {
        residual: ResidualVector {
            entries: DenseVector::from(entries),
            labels,
            weights: w,
        },
        groups,
    })
}

pub fn burgers_residual(net: &MlpNetwork, batch: &CollocationBatch, nu: f64) -> Result<ResidualVector> {
    let spec = ProblemSpec::burgers(nu);
    Ok(evaluate(&spec, net, batch)?.residual)
}

pub fn poisson_residual(net: &MlpNetwork, batch: &CollocationBatch) -> Result<ResidualVector> {
    Ok(evaluate(&ProblemSpec::poisson(), net, batch)?.residual)
}

pub fn helmholtz_residual(net: &MlpNetwork, batch: &CollocationBatch, k: f64, m: f64) -> Result<ResidualVector> {
    Ok(evaluate(&ProblemSpec::helmholtz(k, m), net, batch)?.residual)
}
