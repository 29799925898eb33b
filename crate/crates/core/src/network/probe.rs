use serde::Serialize;

use super::{BlockMode, Channel, ChannelLayout, DerivativeOrder, GradientBlocks, MlpNetwork, OutputAdjoint};
use crate::error::{Error, Result};
use crate::linalg::{empirical_std, DenseMatrix};

/// Per-layer scale statistics of one forward/backward pass.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerScale {
    pub layer: usize,
    /// std of the layer output `h_{ℓ+1}`.
    pub activation_std: f64,
    /// std of `∂L/∂h_{ℓ+1}`.
    pub adjoint_std: f64,
    /// std of the layer's joint weight+bias gradient block.
    pub weight_grad_std: f64,
}

#[derive(Clone, Debug)]
pub struct ScaleProfile {
    pub layers: Vec<LayerScale>,
    pub grads: GradientBlocks,
    /// std of `∂L/∂u`.
    pub sigma_out: f64,
}

/// Forward and backward scale diagnostics for the mean-squared loss
/// `L = 1/(2N) Σ (u − y)²` against `targets` (rows = points).
pub fn scale_probe(net: &MlpNetwork, x: &DenseMatrix, targets: &DenseMatrix) -> Result<ScaleProfile> {
    let out_dim = net.output_dim();
    if targets.rows() != x.rows() || targets.cols() != out_dim {
        return Err(Error::shape(
            "scale_probe targets",
            format!("{}x{out_dim}", x.rows()),
            format!("{}x{}", targets.rows(), targets.cols()),
        ));
    }
    let trace = net.forward(x, DerivativeOrder::Value)?;
    let n = (x.rows() * out_dim) as f64;
    let layout = ChannelLayout::new(x.rows(), net.coords(), DerivativeOrder::Value);
    let mut adj = OutputAdjoint::zeros(layout, out_dim);
    for b in 0..x.rows() {
        for o in 0..out_dim {
            adj.set(Channel::Value, b, o, (trace.output(Channel::Value, b, o) - targets[(b, o)]) / n);
        }
    }
    let back = net.backward(&trace, &adj)?;
    let stds = back.grads.block_stds(BlockMode::PerLayerJoint);
    let layers = (0..net.layers().len())
        .map(|l| {
            Ok(LayerScale {
                layer: l,
                activation_std: empirical_std(trace.layer_output(l).as_slice())?,
                adjoint_std: empirical_std(back.layer_output_adjoints[l].as_slice())?,
                weight_grad_std: stds[l],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let sigma_out = empirical_std(&adj.value_entries())?;
    Ok(ScaleProfile {
        layers,
        grads: back.grads,
        sigma_out,
    })
}
