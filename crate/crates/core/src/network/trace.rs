use super::{Channel, ChannelLayout, DerivativeOrder, GradientBlocks, Layer, MlpNetwork, NormKind, TensorKind};
use crate::error::{Error, Result};
use crate::linalg::{empirical_std, gemm, DenseMatrix};

const NORM_EPS: f64 = 1e-5;

/// Cached forward state of one batch.
#[derive(Clone, Debug)]
pub struct DerivativeTrace {
    layout: ChannelLayout,
    /// Stacked input of every layer, `in_dim × width`.
    inputs: Vec<DenseMatrix>,
    /// Argument of the activation, `out_dim × width`.
    pre: Vec<DenseMatrix>,
    norm: Vec<Option<NormCache>>,
    output: DenseMatrix,
}

#[derive(Clone, Debug)]
struct NormCache {
    xhat: DenseMatrix,
    inv_std: Vec<f64>,
}

impl DerivativeTrace {
    pub fn layout(&self) -> &ChannelLayout {
        &self.layout
    }

    pub fn points(&self) -> usize {
        self.layout.points
    }

    /// Output channel `ch` of point `b`, component `o`.
    #[inline]
    pub fn output(&self, ch: Channel, b: usize, o: usize) -> f64 {
        self.output[(o, self.layout.col(ch, b))]
    }

    pub fn value(&self, b: usize) -> f64 {
        self.output(Channel::Value, b, 0)
    }

    pub fn first(&self, coord: usize, b: usize) -> f64 {
        self.output(Channel::First(coord), b, 0)
    }

    pub fn second(&self, coord: usize, b: usize) -> f64 {
        self.output(Channel::Second(coord), b, 0)
    }

    pub fn output_matrix(&self) -> &DenseMatrix {
        &self.output
    }

    /// Stacked output `h_{ℓ+1}` of layer `layer`.
    pub fn layer_output(&self, layer: usize) -> &DenseMatrix {
        self.inputs.get(layer + 1).unwrap_or(&self.output)
    }

    pub fn layer_input(&self, layer: usize) -> &DenseMatrix {
        &self.inputs[layer]
    }

    pub fn pre_activation(&self, layer: usize) -> &DenseMatrix {
        &self.pre[layer]
    }
}

/// Adjoint of a scalar loss with respect to the output channels.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputAdjoint {
    layout: ChannelLayout,
    values: DenseMatrix,
}

impl OutputAdjoint {
    pub fn zeros(layout: ChannelLayout, output_dim: usize) -> Self {
        OutputAdjoint {
            values: DenseMatrix::zeros(output_dim, layout.width()),
            layout,
        }
    }

    pub fn layout(&self) -> &ChannelLayout {
        &self.layout
    }

    #[inline]
    pub fn get(&self, ch: Channel, b: usize, o: usize) -> f64 {
        self.values[(o, self.layout.col(ch, b))]
    }

    #[inline]
    pub fn set(&mut self, ch: Channel, b: usize, o: usize, v: f64) {
        let c = self.layout.col(ch, b);
        self.values[(o, c)] = v;
    }

    #[inline]
    pub fn add(&mut self, ch: Channel, b: usize, o: usize, v: f64) {
        let c = self.layout.col(ch, b);
        self.values[(o, c)] += v;
    }

    pub fn scale(&mut self, a: f64) {
        self.values.as_mut_slice().iter_mut().for_each(|v| *v *= a);
    }

    /// Value-channel entries `∂L/∂u` for every point and output component.
    pub fn value_entries(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layout.points * self.values.rows());
        for b in 0..self.layout.points {
            for o in 0..self.values.rows() {
                out.push(self.get(Channel::Value, b, o));
            }
        }
        out
    }

    /// Re-lays the adjoint onto `target`. Channels absent from `target` must
    /// carry zero adjoint.
    fn project(&self, target: &ChannelLayout) -> Result<DenseMatrix> {
        if self.layout.points != target.points || self.layout.coords != target.coords {
            return Err(Error::shape(
                "OutputAdjoint",
                format!("{} points x {} coords", target.points, target.coords),
                format!("{} points x {} coords", self.layout.points, self.layout.coords),
            ));
        }
        if self.layout == *target {
            return Ok(self.values.clone());
        }
        let mut out = DenseMatrix::zeros(self.values.rows(), target.width());
        let mut channels = vec![Channel::Value];
        for i in 0..self.layout.coords {
            channels.push(Channel::First(i));
            channels.push(Channel::Second(i));
        }
        for ch in channels {
            let Some(_) = self.layout.channel_index(ch) else { continue };
            let present = target.channel_index(ch).is_some();
            for b in 0..target.points {
                for o in 0..self.values.rows() {
                    let v = self.get(ch, b, o);
                    if present {
                        out[(o, target.col(ch, b))] = v;
                    } else if v != 0.0 {
                        return Err(Error::Contract(format!(
                            "nonzero adjoint on channel {ch:?} that the trace (order {:?}) did not compute",
                            target.order
                        )));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Population std of the value-channel adjoints of all given groups,
/// concatenated in order.
pub fn output_adjoint_std(adjoints: &[&OutputAdjoint]) -> Result<f64> {
    let entries: Vec<f64> = adjoints.iter().flat_map(|a| a.value_entries()).collect();
    if entries.is_empty() {
        return Err(Error::Domain("output adjoint of an empty batch".into()));
    }
    empirical_std(&entries)
}

/// Result of a reverse pass.
#[derive(Clone, Debug)]
pub struct Backward {
    pub grads: GradientBlocks,
    /// `∂L/∂h_{ℓ+1}` (all channels, stacked) for every layer `ℓ`.
    pub layer_output_adjoints: Vec<DenseMatrix>,
    /// `∂L/∂h_0` with respect to the encoded network input.
    pub input_adjoint: DenseMatrix,
}

impl MlpNetwork {
    /// Forward pass carrying derivative channels up to `order` for every raw
    /// input coordinate. `x` holds one point per row.
    pub fn forward(&self, x: &DenseMatrix, order: DerivativeOrder) -> Result<DerivativeTrace> {
        if order > DerivativeOrder::Value && self.has_norm_layers() {
            return Err(Error::Contract(
                "normalization layers support the value channel only".into(),
            ));
        }
        if x.rows() == 0 {
            return Err(Error::Domain("forward pass on an empty batch".into()));
        }
        let layout = ChannelLayout::new(x.rows(), self.coords(), order);
        let mut h = self.encode_inputs(x, &layout)?;
        let n_layers = self.layers().len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        let mut norm = Vec::with_capacity(n_layers);
        for (l, layer) in self.layers().iter().enumerate() {
            let mut z = DenseMatrix::zeros(layer.spec.out_dim, layout.width());
            gemm(false, false, &layer.weight, &h, &mut z, false)?;
            for j in 0..layer.spec.out_dim {
                let bj = layer.bias[j];
                z.row_mut(j)[..layout.points].iter_mut().for_each(|v| *v += bj);
            }
            let cache = match &layer.norm {
                Some(params) => Some(norm_forward(params.kind, &mut z, &params.scale, &params.shift)),
                None => None,
            };
            let out = activate(layer, &z, &layout);
            if !out.is_finite() {
                return Err(Error::Overflow {
                    layer: l,
                    detail: "non-finite activation in forward pass".into(),
                });
            }
            inputs.push(std::mem::replace(&mut h, out));
            pre.push(z);
            norm.push(cache);
        }
        Ok(DerivativeTrace {
            layout,
            inputs,
            pre,
            norm,
            output: h,
        })
    }

    /// Exact reverse-mode gradient of the loss whose output-channel adjoint
    /// is `adjoint`, including the paths through derivative channels.
    pub fn backward(&self, trace: &DerivativeTrace, adjoint: &OutputAdjoint) -> Result<Backward> {
        let layout = self.param_layout();
        let mut grads = GradientBlocks::zeros(layout.clone());
        let mut outs = vec![DenseMatrix::zeros(0, 0); self.layers().len()];
        let points = trace.layout.points;
        let input_adjoint = self.reverse(trace, adjoint, |l, g, dz, norm_grads| {
            outs[l] = g.clone();
            let layer = &self.layers()[l];
            let mut dw = DenseMatrix::zeros(layer.spec.out_dim, layer.spec.in_dim);
            gemm(false, true, dz, &trace.inputs[l], &mut dw, false)?;
            let flat = grads.flat_mut();
            let wr = layout.tensor_range(l, TensorKind::Weight).expect("weight");
            flat[wr].copy_from_slice(dw.as_slice());
            let br = layout.tensor_range(l, TensorKind::Bias).expect("bias");
            for (j, slot) in flat[br].iter_mut().enumerate() {
                *slot = dz.row(j)[..points].iter().sum();
            }
            if let Some((gs, gb)) = norm_grads {
                let sr = layout.tensor_range(l, TensorKind::NormScale).expect("norm scale");
                flat[sr].copy_from_slice(&gs);
                let hr = layout.tensor_range(l, TensorKind::NormShift).expect("norm shift");
                flat[hr].copy_from_slice(&gb);
            }
            Ok(())
        })?;
        Ok(Backward {
            grads,
            layer_output_adjoints: outs,
            input_adjoint,
        })
    }

    /// Per-point parameter gradients: row `b` is the gradient of the part of
    /// the loss attributed to point `b` by the adjoint. Used to assemble
    /// residual Jacobians one row per point.
    pub fn backward_rows(&self, trace: &DerivativeTrace, adjoint: &OutputAdjoint) -> Result<DenseMatrix> {
        if self.has_norm_layers() {
            return Err(Error::Contract(
                "per-point gradients are undefined with batch-coupled normalization".into(),
            ));
        }
        let layout = self.param_layout();
        let lay = trace.layout;
        let points = lay.points;
        let channels = lay.channels();
        let mut rows = DenseMatrix::zeros(points, layout.len());
        self.reverse(trace, adjoint, |l, _g, dz, _| {
            let layer = &self.layers()[l];
            let (n_out, n_in) = (layer.spec.out_dim, layer.spec.in_dim);
            let xt = trace.inputs[l].transpose();
            let wr = layout.tensor_range(l, TensorKind::Weight).expect("weight");
            let br = layout.tensor_range(l, TensorKind::Bias).expect("bias");
            for b in 0..points {
                let row = rows.row_mut(b);
                for c in 0..channels {
                    let col = c * points + b;
                    let xcol = xt.row(col);
                    for j in 0..n_out {
                        let d = dz[(j, col)];
                        if d == 0.0 {
                            continue;
                        }
                        let dst = &mut row[wr.start + j * n_in..wr.start + (j + 1) * n_in];
                        for (w, x) in dst.iter_mut().zip(xcol) {
                            *w += d * x;
                        }
                    }
                }
                for j in 0..n_out {
                    row[br.start + j] += dz[(j, b)];
                }
            }
            Ok(())
        })?;
        Ok(rows)
    }

    /// Core reverse sweep. `visit(layer, ∂L/∂h_{ℓ+1}, ∂L/∂z_ℓ, norm grads)`
    /// is called from the last layer down; returns the adjoint of the
    /// encoded input.
    fn reverse(
        &self,
        trace: &DerivativeTrace,
        adjoint: &OutputAdjoint,
        mut visit: impl FnMut(usize, &DenseMatrix, &DenseMatrix, Option<(Vec<f64>, Vec<f64>)>) -> Result<()>,
    ) -> Result<DenseMatrix> {
        if adjoint.values.rows() != self.output_dim() {
            return Err(Error::shape("backward adjoint", self.output_dim(), adjoint.values.rows()));
        }
        if trace.inputs.len() != self.layers().len() {
            return Err(Error::Contract("trace was produced by a different network".into()));
        }
        let layout = trace.layout;
        let mut g = adjoint.project(&layout)?;
        for (l, layer) in self.layers().iter().enumerate().rev() {
            let mut dz = activate_reverse(layer, &trace.pre[l], &g, &layout);
            let norm_grads = match (&layer.norm, &trace.norm[l]) {
                (Some(params), Some(cache)) => Some(norm_backward(params.kind, &mut dz, cache, &params.scale)),
                _ => None,
            };
            visit(l, &g, &dz, norm_grads)?;
            let mut prev = DenseMatrix::zeros(layer.spec.in_dim, layout.width());
            gemm(true, false, &layer.weight, &dz, &mut prev, false)?;
            g = prev;
        }
        Ok(g)
    }
}

fn activate(layer: &Layer, z: &DenseMatrix, layout: &ChannelLayout) -> DenseMatrix {
    let act = layer.spec.activation;
    let (b_n, d) = (layout.points, layout.coords);
    let first = layout.order.has_first();
    let second = layout.order.has_second();
    let mut out = DenseMatrix::zeros(z.rows(), z.cols());
    for j in 0..z.rows() {
        let zr = z.row(j);
        let or = out.row_mut(j);
        for b in 0..b_n {
            let [f0, f1, f2, _] = act.derivatives(zr[b]);
            or[b] = f0;
            if first {
                for i in 0..d {
                    let pc = (1 + i) * b_n + b;
                    let zp = zr[pc];
                    or[pc] = f1 * zp;
                    if second {
                        let qc = (1 + d + i) * b_n + b;
                        or[qc] = f2 * zp * zp + f1 * zr[qc];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of the activation argument given the adjoint `g` of the layer
/// output, for all channels.
fn activate_reverse(layer: &Layer, z: &DenseMatrix, g: &DenseMatrix, layout: &ChannelLayout) -> DenseMatrix {
    let act = layer.spec.activation;
    let (b_n, d) = (layout.points, layout.coords);
    let first = layout.order.has_first();
    let second = layout.order.has_second();
    let mut out = DenseMatrix::zeros(z.rows(), z.cols());
    for j in 0..z.rows() {
        let zr = z.row(j);
        let gr = g.row(j);
        let or = out.row_mut(j);
        for b in 0..b_n {
            let [_, f1, f2, f3] = act.derivatives(zr[b]);
            let mut dv = f1 * gr[b];
            if first {
                for i in 0..d {
                    let pc = (1 + i) * b_n + b;
                    let zp = zr[pc];
                    let gp = gr[pc];
                    dv += f2 * zp * gp;
                    let mut dp = f1 * gp;
                    if second {
                        let qc = (1 + d + i) * b_n + b;
                        let zq = zr[qc];
                        let gq = gr[qc];
                        dv += (f3 * zp * zp + f2 * zq) * gq;
                        dp += 2.0 * f2 * zp * gq;
                        or[qc] = f1 * gq;
                    }
                    or[pc] = dp;
                }
            }
            or[b] = dv;
        }
    }
    out
}

/// Normalizes the value channel of `z` in place (`z ← γ x̂ + β`).
fn norm_forward(kind: NormKind, z: &mut DenseMatrix, scale: &[f64], shift: &[f64]) -> NormCache {
    let (n, b_n) = (z.rows(), z.cols());
    let mut xhat = DenseMatrix::zeros(n, b_n);
    let mut inv_std;
    match kind {
        NormKind::BatchNorm => {
            inv_std = vec![0.0; n];
            for j in 0..n {
                let row = z.row(j);
                let mu = row.iter().sum::<f64>() / b_n as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / b_n as f64;
                let is = 1.0 / (var + NORM_EPS).sqrt();
                inv_std[j] = is;
                for b in 0..b_n {
                    xhat[(j, b)] = (row[b] - mu) * is;
                }
            }
        }
        NormKind::LayerNorm => {
            inv_std = vec![0.0; b_n];
            for b in 0..b_n {
                let mu = (0..n).map(|j| z[(j, b)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|j| (z[(j, b)] - mu).powi(2)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + NORM_EPS).sqrt();
                inv_std[b] = is;
                for j in 0..n {
                    xhat[(j, b)] = (z[(j, b)] - mu) * is;
                }
            }
        }
    }
    for j in 0..n {
        for b in 0..b_n {
            z[(j, b)] = scale[j] * xhat[(j, b)] + shift[j];
        }
    }
    NormCache { xhat, inv_std }
}

/// Turns `dy` (adjoint of the normalized output) into the adjoint of the
/// affine output in place; returns the scale and shift gradients.
fn norm_backward(kind: NormKind, dy: &mut DenseMatrix, cache: &NormCache, scale: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (n, b_n) = (dy.rows(), dy.cols());
    let xh = &cache.xhat;
    let mut gs = vec![0.0; n];
    let mut gb = vec![0.0; n];
    for j in 0..n {
        for b in 0..b_n {
            gs[j] += dy[(j, b)] * xh[(j, b)];
            gb[j] += dy[(j, b)];
        }
    }
    match kind {
        NormKind::BatchNorm => {
            let m = b_n as f64;
            for j in 0..n {
                let dxh: Vec<f64> = (0..b_n).map(|b| dy[(j, b)] * scale[j]).collect();
                let s1: f64 = dxh.iter().sum();
                let s2: f64 = dxh.iter().enumerate().map(|(b, d)| d * xh[(j, b)]).sum();
                for b in 0..b_n {
                    dy[(j, b)] = cache.inv_std[j] / m * (m * dxh[b] - s1 - xh[(j, b)] * s2);
                }
            }
        }
        NormKind::LayerNorm => {
            let m = n as f64;
            for b in 0..b_n {
                let dxh: Vec<f64> = (0..n).map(|j| dy[(j, b)] * scale[j]).collect();
                let s1: f64 = dxh.iter().sum();
                let s2: f64 = dxh.iter().enumerate().map(|(j, d)| d * xh[(j, b)]).sum();
                for j in 0..n {
                    dy[(j, b)] = cache.inv_std[b] / m * (m * dxh[j] - s1 - xh[(j, b)] * s2);
                }
            }
        }
    }
    (gs, gb)
}
