use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{create, prepare_dir, streams};
use crate::error::Result;
use crate::linalg::{DenseMatrix, SeededRng};
use crate::network::{scale_probe, Activation, ArchitectureConfig, BlockMode, Initializer, MlpNetwork, NormKind};
use crate::optim::{sign_rescale, stablegrad_rescale, Preprocessor};

/// One scale-flow configuration: a deep MLP probed on standard normal
/// inputs and targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleflowConfig {
    pub depth: usize,
    pub width: usize,
    pub input_dim: usize,
    pub points: usize,
    pub activation: Activation,
    pub init: Initializer,
    #[serde(default)]
    pub norm: Option<NormKind>,
    #[serde(default)]
    pub preprocessor: Preprocessor,
    pub seed: u64,
}

impl ScaleflowConfig {
    /// Depth 20, width 64, tanh, 256 points of dimension 64.
    pub fn standard(seed: u64) -> Self {
        ScaleflowConfig {
            depth: 20,
            width: 64,
            input_dim: 64,
            points: 256,
            activation: Activation::Tanh,
            init: Initializer::fan_in(),
            norm: None,
            preprocessor: Preprocessor::None,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleflowPanel {
    pub name: String,
    pub config: ScaleflowConfig,
}

/// Fan-in, fan-out, both with batch and layer normalization, and fan-in
/// with StableGrad.
pub fn default_panels(seed: u64) -> Vec<ScaleflowPanel> {
    let base = ScaleflowConfig::standard(seed);
    let mut panels = Vec::new();
    for (norm_name, norm) in [("", None), ("_batchnorm", Some(NormKind::BatchNorm)), ("_layernorm", Some(NormKind::LayerNorm))] {
        for (init_name, init) in [("fan_in", Initializer::fan_in()), ("fan_out", Initializer::fan_out())] {
            panels.push(ScaleflowPanel {
                name: format!("{init_name}{norm_name}"),
                config: ScaleflowConfig { init, norm, ..base.clone() },
            });
        }
    }
    panels.push(ScaleflowPanel {
        name: "fan_in_stablegrad".into(),
        config: ScaleflowConfig {
            preprocessor: Preprocessor::StableGrad(Default::default()),
            ..base
        },
    });
    panels
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub layer: usize,
    pub activation_std: f64,
    pub adjoint_std: f64,
    pub weight_grad_std_raw: f64,
    /// Block std after the panel's preprocessor.
    pub weight_grad_std_post: f64,
}

/// Per-layer forward and backward scales of one panel. Overflow surfaces as
/// `Error::Overflow` with the offending layer.
pub fn run_scaleflow(cfg: &ScaleflowConfig) -> Result<Vec<ScaleRow>> {
    let arch = ArchitectureConfig {
        hidden_layers: cfg.depth,
        width: cfg.width,
        activation: cfg.activation,
        output_dim: 1,
        fourier: None,
        norm: cfg.norm,
    };
    let root = SeededRng::new(cfg.seed);
    let mut net = MlpNetwork::from_config(cfg.input_dim, &arch)?;
    net.initialize(&cfg.init, &mut root.fork(streams::INIT));
    let mut rng = root.fork(streams::PROBE);
    let x = DenseMatrix::from_fn(cfg.points, cfg.input_dim, |_, _| rng.normal());
    let y = DenseMatrix::from_fn(cfg.points, 1, |_, _| rng.normal());
    let prof = scale_probe(&net, &x, &y)?;
    let post = match &cfg.preprocessor {
        Preprocessor::None => prof.grads.clone(),
        Preprocessor::Sign => sign_rescale(&prof.grads),
        Preprocessor::StableGrad(c) => stablegrad_rescale(&prof.grads, prof.sigma_out, c)?.grads,
    };
    let post_stds = post.block_stds(BlockMode::PerLayerJoint);
    Ok(prof
        .layers
        .iter()
        .map(|l| ScaleRow {
            layer: l.layer,
            activation_std: l.activation_std,
            adjoint_std: l.adjoint_std,
            weight_grad_std_raw: l.weight_grad_std,
            weight_grad_std_post: post_stds[l.layer],
        })
        .collect())
}

/// Writes `scaleflow_<panel>.csv` into `dir` and returns its path.
pub fn write_scaleflow_csv(dir: &Path, panel: &str, rows: &[ScaleRow]) -> Result<std::path::PathBuf> {
    prepare_dir(dir)?;
    let path = dir.join(format!("scaleflow_{panel}.csv"));
    let mut w = create(&path)?;
    writeln!(w, "layer,activation_std,adjoint_std,weight_grad_std_raw,weight_grad_std_post")?;
    for r in rows {
        writeln!(
            w,
            "{},{:.9e},{:.9e},{:.9e},{:.9e}",
            r.layer, r.activation_std, r.adjoint_std, r.weight_grad_std_raw, r.weight_grad_std_post
        )?;
    }
    w.flush()?;
    Ok(path)
}
