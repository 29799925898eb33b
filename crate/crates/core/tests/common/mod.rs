#![allow(dead_code)]

use stablegrad::linalg::{DenseMatrix, SeededRng};
use stablegrad::network::{Activation, ArchitectureConfig, FourierFeatures, Initializer, MlpNetwork};

pub fn random_net(
    coords: usize,
    hidden_layers: usize,
    width: usize,
    activation: Activation,
    fourier: Option<FourierFeatures>,
    rng: &mut SeededRng,
) -> MlpNetwork {
    let cfg = ArchitectureConfig {
        hidden_layers,
        width,
        activation,
        output_dim: 1,
        fourier,
        norm: None,
    };
    let mut net = MlpNetwork::from_config(coords, &cfg).unwrap();
    net.initialize(&Initializer::fan_in(), rng);
    // nonzero biases so every parameter has a generic gradient
    let mut theta = net.flat_params();
    for t in theta.iter_mut() {
        if *t == 0.0 {
            *t = 0.1 * rng.normal();
        }
    }
    net.set_flat_params(&theta).unwrap();
    net
}

pub fn random_points(n: usize, coords: usize, lo: f64, hi: f64, rng: &mut SeededRng) -> DenseMatrix {
    DenseMatrix::from_fn(n, coords, |_, _| rng.uniform(lo, hi))
}

/// Central finite-difference gradient of `f` with respect to the flat
/// parameters of `net`.
pub fn fd_param_gradient(net: &MlpNetwork, h: f64, mut f: impl FnMut(&MlpNetwork) -> f64) -> Vec<f64> {
    let theta = net.flat_params();
    let mut work = net.clone();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let mut t = theta.clone();
        t[i] = theta[i] + h;
        work.set_flat_params(&t).unwrap();
        let fp = f(&work);
        t[i] = theta[i] - h;
        work.set_flat_params(&t).unwrap();
        let fm = f(&work);
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// `max_i |a_i − b_i| / max_i |b_i|`.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Dense symmetric eigenvalues via nalgebra (independent oracle).
pub fn dense_lambda_max(m: &DenseMatrix) -> f64 {
    nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
        .symmetric_eigen()
        .eigenvalues
        .max()
}
