use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Channel, ChannelLayout};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Sinusoidal input encoding: each coordinate `x_i` becomes
/// `[x_i?, sin(πf x_i)…, cos(πf x_i)…]` over the configured frequencies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierFeatures {
    pub frequencies: Vec<f64>,
    pub include_raw: bool,
    pub coordinate_count: usize,
}

impl FourierFeatures {
    /// Frequencies `1..=max_frequency`, raw coordinates retained.
    pub fn integer(coordinate_count: usize, max_frequency: usize) -> Self {
        FourierFeatures {
            frequencies: (1..=max_frequency).map(|f| f as f64).collect(),
            include_raw: true,
            coordinate_count,
        }
    }

    fn per_coordinate(&self) -> usize {
        2 * self.frequencies.len() + usize::from(self.include_raw)
    }

    pub fn output_dim(&self) -> usize {
        self.coordinate_count * self.per_coordinate()
    }

    /// Index of the `sin(πf x_i)` feature for frequency slot `k`.
    pub fn sin_index(&self, coord: usize, k: usize) -> usize {
        coord * self.per_coordinate() + usize::from(self.include_raw) + k
    }

    pub fn cos_index(&self, coord: usize, k: usize) -> usize {
        self.sin_index(coord, k) + self.frequencies.len()
    }

    pub fn raw_index(&self, coord: usize) -> Option<usize> {
        self.include_raw.then(|| coord * self.per_coordinate())
    }

    /// Encodes a point batch (rows = points) into the stacked channel layout
    /// used by the network: value, `∂/∂x_i` and `∂²/∂x_i²` of every feature.
    pub fn encode(&self, x: &DenseMatrix, layout: &ChannelLayout) -> Result<DenseMatrix> {
        if x.cols() != self.coordinate_count {
            return Err(Error::shape("FourierFeatures::encode", self.coordinate_count, x.cols()));
        }
        let mut out = DenseMatrix::zeros(self.output_dim(), layout.width());
        for b in 0..layout.points {
            for i in 0..self.coordinate_count {
                let xi = x[(b, i)];
                if let Some(r) = self.raw_index(i) {
                    out[(r, layout.col(Channel::Value, b))] = xi;
                    if layout.order.has_first() {
                        out[(r, layout.col(Channel::First(i), b))] = 1.0;
                    }
                }
                for (k, &f) in self.frequencies.iter().enumerate() {
                    let w = PI * f;
                    let (s, c) = (w * xi).sin_cos();
                    let (si, ci) = (self.sin_index(i, k), self.cos_index(i, k));
                    out[(si, layout.col(Channel::Value, b))] = s;
                    out[(ci, layout.col(Channel::Value, b))] = c;
                    if layout.order.has_first() {
                        out[(si, layout.col(Channel::First(i), b))] = w * c;
                        out[(ci, layout.col(Channel::First(i), b))] = -w * s;
                    }
                    if layout.order.has_second() {
                        out[(si, layout.col(Channel::Second(i), b))] = -w * w * s;
                        out[(ci, layout.col(Channel::Second(i), b))] = -w * w * c;
                    }
                }
            }
        }
        Ok(out)
    }
}
