use serde::{Deserialize, Serialize};

use super::MlpNetwork;
use crate::linalg::SeededRng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FanMode {
    #[default]
    FanIn,
    FanOut,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    #[default]
    Normal,
    Uniform,
}

/// Variance-scaling initializer: `Var(W) = gain² / fan`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Initializer {
    #[serde(default)]
    pub mode: FanMode,
    /// `None` uses the activation's default gain.
    #[serde(default)]
    pub gain: Option<f64>,
    #[serde(default)]
    pub distribution: Distribution,
}

impl Initializer {
    pub fn fan_in() -> Self {
        Initializer::default()
    }

    pub fn fan_out() -> Self {
        Initializer {
            mode: FanMode::FanOut,
            ..Initializer::default()
        }
    }
}

impl MlpNetwork {
    /// Samples all weights layer by layer in θ order; biases and norm shifts
    /// become zero, norm scales one.
    pub fn initialize(&mut self, init: &Initializer, rng: &mut SeededRng) {
        for layer in self.layers_mut() {
            let fan = match init.mode {
                FanMode::FanIn => layer.spec.in_dim,
                FanMode::FanOut => layer.spec.out_dim,
            };
            let gain = init.gain.unwrap_or_else(|| layer.spec.activation.default_gain());
            let std = gain / (fan as f64).sqrt();
            let half_width = 3f64.sqrt() * std;
            for w in layer.weight.as_mut_slice() {
                *w = match init.distribution {
                    Distribution::Normal => std * rng.normal(),
                    Distribution::Uniform => rng.uniform(-half_width, half_width),
                };
            }
            layer.bias.iter_mut().for_each(|b| *b = 0.0);
            if let Some(n) = &mut layer.norm {
                n.scale.iter_mut().for_each(|s| *s = 1.0);
                n.shift.iter_mut().for_each(|s| *s = 0.0);
            }
        }
    }
}
