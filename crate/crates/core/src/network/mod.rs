//! Fully connected networks that propagate input-derivative channels.
//!
//! Alongside the value `h_ℓ`, every layer carries the first derivatives
//! `p_ℓ⁽ⁱ⁾ = ∂h_ℓ/∂x_i` and the diagonal second derivatives
//! `q_ℓ⁽ⁱ⁾ = ∂²h_ℓ/∂x_i²` for each input coordinate:
//!
//! ```text
//! z = W h + b          p' = φ'(z) ⊙ W p          q' = φ''(z) ⊙ (W p)² + φ'(z) ⊙ W q
//! ```
//!
//! All channels of all points are stacked side by side, so one layer is a
//! single matrix product followed by an element-wise pass. The reverse pass
//! in [`trace`] differentiates that recursion exactly, including the
//! coupling of the derivative channels back into the value channel.

mod activation;
mod features;
mod init;
mod probe;
mod trace;

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use activation::Activation;
pub use features::FourierFeatures;
pub use init::{Distribution, FanMode, Initializer};
pub use probe::{scale_probe, LayerScale, ScaleProfile};
pub use trace::{output_adjoint_std, Backward, DerivativeTrace, OutputAdjoint};

use crate::error::{Error, Result};
use crate::linalg::{empirical_std, DenseMatrix, DenseVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DerivativeOrder {
    Value = 0,
    First = 1,
    Second = 2,
}

impl DerivativeOrder {
    pub fn has_first(self) -> bool {
        self >= DerivativeOrder::First
    }

    pub fn has_second(self) -> bool {
        self == DerivativeOrder::Second
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Channel {
    Value,
    /// `∂/∂x_i`
    First(usize),
    /// `∂²/∂x_i²`
    Second(usize),
}

/// Column layout of a stacked channel matrix: column `c·points + b` holds
/// channel `c` of point `b`; channel 0 is the value, then one first-derivative
/// channel per coordinate, then one second-derivative channel per coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelLayout {
    pub points: usize,
    pub coords: usize,
    pub order: DerivativeOrder,
}

impl ChannelLayout {
    pub fn new(points: usize, coords: usize, order: DerivativeOrder) -> Self {
        ChannelLayout {
            points,
            coords,
            order,
        }
    }

    pub fn channels(&self) -> usize {
        1 + self.coords * (usize::from(self.order.has_first()) + usize::from(self.order.has_second()))
    }

    pub fn width(&self) -> usize {
        self.channels() * self.points
    }

    pub fn channel_index(&self, ch: Channel) -> Option<usize> {
        match ch {
            Channel::Value => Some(0),
            Channel::First(i) if self.order.has_first() && i < self.coords => Some(1 + i),
            Channel::Second(i) if self.order.has_second() && i < self.coords => {
                Some(1 + self.coords + i)
            }
            _ => None,
        }
    }

    /// Column of `(channel, point)`. Panics when the channel is not carried.
    #[inline]
    pub fn col(&self, ch: Channel, point: usize) -> usize {
        let c = self
            .channel_index(ch)
            .unwrap_or_else(|| panic!("channel {ch:?} not present at order {:?}", self.order));
        c * self.points + point
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    BatchNorm,
    LayerNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    #[serde(default)]
    pub norm: Option<NormKind>,
}

/// Learnable affine part of a normalization layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub kind: NormKind,
    pub scale: DenseVector,
    pub shift: DenseVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub spec: LayerSpec,
    /// `out_dim × in_dim`
    pub weight: DenseMatrix,
    pub bias: DenseVector,
    pub norm: Option<NormParams>,
}

impl Layer {
    fn new(spec: LayerSpec) -> Self {
        let norm = spec.norm.map(|kind| NormParams {
            kind,
            scale: DenseVector::from(vec![1.0; spec.out_dim]),
            shift: DenseVector::zeros(spec.out_dim),
        });
        Layer {
            weight: DenseMatrix::zeros(spec.out_dim, spec.in_dim),
            bias: DenseVector::zeros(spec.out_dim),
            norm,
            spec,
        }
    }

    pub fn num_params(&self) -> usize {
        let n = self.spec.out_dim;
        n * self.spec.in_dim + n + if self.norm.is_some() { 2 * n } else { 0 }
    }
}

/// Architecture description as it appears in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    /// Number of hidden layers of size `width`; the network has
    /// `hidden_layers + 1` affine layers.
    pub hidden_layers: usize,
    pub width: usize,
    pub activation: Activation,
    #[serde(default = "default_output_dim")]
    pub output_dim: usize,
    #[serde(default)]
    pub fourier: Option<FourierFeatures>,
    /// Normalization after every hidden affine map (diagnostic runs only).
    #[serde(default)]
    pub norm: Option<NormKind>,
}

fn default_output_dim() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorInfo {
    pub layer: usize,
    pub kind: TensorKind,
    pub range: Range<usize>,
}

/// How parameters are grouped into the blocks that get one scale each.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockMode {
    /// One block per layer: weights, bias (and norm parameters) together.
    #[default]
    PerLayerJoint,
    /// One block per tensor.
    PerTensor,
}

/// Position of every parameter tensor in the flat parameter vector. Order is
/// layer by layer; within a layer: weight (row-major), bias, norm scale,
/// norm shift.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    tensors: Vec<TensorInfo>,
    layers: usize,
}

impl ParamLayout {
    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.last().map_or(0, |t| t.range.end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer_range(&self, layer: usize) -> Range<usize> {
        let mut it = self.tensors.iter().filter(|t| t.layer == layer);
        let first = it.next().expect("layer index in range");
        let end = it.last().map_or(first.range.end, |t| t.range.end);
        first.range.start..end
    }

    pub fn tensor_range(&self, layer: usize, kind: TensorKind) -> Option<Range<usize>> {
        self.tensors
            .iter()
            .find(|t| t.layer == layer && t.kind == kind)
            .map(|t| t.range.clone())
    }

    pub fn blocks(&self, mode: BlockMode) -> Vec<Range<usize>> {
        match mode {
            BlockMode::PerLayerJoint => (0..self.layers).map(|l| self.layer_range(l)).collect(),
            BlockMode::PerTensor => self.tensors.iter().map(|t| t.range.clone()).collect(),
        }
    }
}

/// Parameter gradient in flat `θ` order together with its tensor layout.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBlocks {
    values: Vec<f64>,
    layout: ParamLayout,
}

impl GradientBlocks {
    pub fn new(values: Vec<f64>, layout: ParamLayout) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::shape("GradientBlocks::new", layout.len(), values.len()));
        }
        Ok(GradientBlocks { values, layout })
    }

    pub fn zeros(layout: ParamLayout) -> Self {
        GradientBlocks {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn flat(&self) -> &[f64] {
        &self.values
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn block_ranges(&self, mode: BlockMode) -> Vec<Range<usize>> {
        self.layout.blocks(mode)
    }

    pub fn block(&self, range: Range<usize>) -> &[f64] {
        &self.values[range]
    }

    /// `σ_ℓ` of every block: population std of the flattened block.
    pub fn block_stds(&self, mode: BlockMode) -> Vec<f64> {
        self.block_ranges(mode)
            .into_iter()
            .map(|r| empirical_std(&self.values[r]).unwrap_or(0.0))
            .collect()
    }

    pub fn weight(&self, layer: usize) -> &[f64] {
        &self.values[self.layout.tensor_range(layer, TensorKind::Weight).expect("layer exists")]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        &self.values[self.layout.tensor_range(layer, TensorKind::Bias).expect("layer exists")]
    }

    /// Element-wise sum with another gradient of the same layout.
    pub fn add_assign(&mut self, other: &GradientBlocks) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::shape("GradientBlocks::add_assign", self.values.len(), other.values.len()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<GradientBlocks> {
        GradientBlocks::new(values, self.layout.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpNetwork {
    layers: Vec<Layer>,
    /// Raw input coordinates (before any feature map).
    coords: usize,
    feature_map: Option<FourierFeatures>,
}

impl MlpNetwork {
    /// Zero-initialized network from explicit layer specs.
    pub fn new(coords: usize, feature_map: Option<FourierFeatures>, specs: Vec<LayerSpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        let input_dim = match &feature_map {
            Some(f) => {
                if f.coordinate_count != coords {
                    return Err(Error::Config(format!(
                        "feature map expects {} coordinates, network has {coords}",
                        f.coordinate_count
                    )));
                }
                f.output_dim()
            }
            None => coords,
        };
        let mut prev = input_dim;
        for (i, s) in specs.iter().enumerate() {
            if s.in_dim == 0 || s.out_dim == 0 {
                return Err(Error::Config(format!("layer {i} has an empty dimension")));
            }
            if s.in_dim != prev {
                return Err(Error::Config(format!(
                    "layer {i} expects {} inputs but receives {prev}",
                    s.in_dim
                )));
            }
            prev = s.out_dim;
        }
        Ok(MlpNetwork {
            layers: specs.into_iter().map(Layer::new).collect(),
            coords,
            feature_map,
        })
    }

    /// `hidden_layers` hidden layers with the configured activation followed
    /// by an identity output layer.
    pub fn from_config(coords: usize, cfg: &ArchitectureConfig) -> Result<Self> {
        let input_dim = cfg.fourier.as_ref().map_or(coords, FourierFeatures::output_dim);
        let mut specs = Vec::with_capacity(cfg.hidden_layers + 1);
        let mut prev = input_dim;
        for _ in 0..cfg.hidden_layers {
            specs.push(LayerSpec {
                in_dim: prev,
                out_dim: cfg.width,
                activation: cfg.activation,
                norm: cfg.norm,
            });
            prev = cfg.width;
        }
        specs.push(LayerSpec {
            in_dim: prev,
            out_dim: cfg.output_dim,
            activation: Activation::Identity,
            norm: None,
        });
        MlpNetwork::new(coords, cfg.fourier.clone(), specs)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn coords(&self) -> usize {
        self.coords
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.spec.out_dim)
    }

    pub fn feature_map(&self) -> Option<&FourierFeatures> {
        self.feature_map.as_ref()
    }

    pub fn has_norm_layers(&self) -> bool {
        self.layers.iter().any(|l| l.norm.is_some())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    pub fn param_layout(&self) -> ParamLayout {
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut push = |layer, kind, len: usize, offset: &mut usize| {
            tensors.push(TensorInfo {
                layer,
                kind,
                range: *offset..*offset + len,
            });
            *offset += len;
        };
        for (l, layer) in self.layers.iter().enumerate() {
            let n = layer.spec.out_dim;
            push(l, TensorKind::Weight, n * layer.spec.in_dim, &mut offset);
            push(l, TensorKind::Bias, n, &mut offset);
            if layer.norm.is_some() {
                push(l, TensorKind::NormScale, n, &mut offset);
                push(l, TensorKind::NormShift, n, &mut offset);
            }
        }
        ParamLayout {
            tensors,
            layers: self.layers.len(),
        }
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend_from_slice(layer.weight.as_slice());
            out.extend_from_slice(&layer.bias);
            if let Some(n) = &layer.norm {
                out.extend_from_slice(&n.scale);
                out.extend_from_slice(&n.shift);
            }
        }
        out
    }

    pub fn set_flat_params(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.num_params() {
            return Err(Error::shape("set_flat_params", self.num_params(), theta.len()));
        }
        let mut rest = theta;
        let mut take = |dst: &mut [f64]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        for layer in &mut self.layers {
            take(layer.weight.as_mut_slice());
            take(&mut layer.bias);
            if let Some(n) = &mut layer.norm {
                take(&mut n.scale);
                take(&mut n.shift);
            }
        }
        Ok(())
    }

    /// Stacked channel matrix of the first layer's input for a batch of raw
    /// points (rows = points).
    pub fn encode_inputs(&self, x: &DenseMatrix, layout: &ChannelLayout) -> Result<DenseMatrix> {
        if x.cols() != self.coords {
            return Err(Error::shape("network input", self.coords, x.cols()));
        }
        if let Some(f) = &self.feature_map {
            return f.encode(x, layout);
        }
        let mut out = DenseMatrix::zeros(self.coords, layout.width());
        for b in 0..layout.points {
            for i in 0..self.coords {
                out[(i, layout.col(Channel::Value, b))] = x[(b, i)];
                if layout.order.has_first() {
                    out[(i, layout.col(Channel::First(i), b))] = 1.0;
                }
            }
        }
        Ok(out)
    }

    /// Output values only, for a batch of points (rows = points).
    pub fn predict(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let trace = self.forward(x, DerivativeOrder::Value)?;
        let out = self.output_dim();
        Ok(DenseMatrix::from_fn(x.rows(), out, |b, o| trace.output(Channel::Value, b, o)))
    }
}
