mod common;

use std::ops::Range;

use common::{fd_param_gradient, random_net};
use proptest::prelude::*;
use stablegrad::diagnostics::{
    assemble_jacobian, lambda_max_k, lambda_max_ksg, linearization_error, local_decrease_check, rayleigh_dense,
    rayleigh_k, rayleigh_ksg, update_geometry, AlphaBlocks, DiagnosticSetup, JacobianBlocks, DEFAULT_JACOBIAN_CAP,
};
use stablegrad::linalg::{norm2, symmetric_eigenvalues, DenseMatrix, DenseVector, PowerIterationConfig, SeededRng};
use stablegrad::network::{Activation, BlockMode};
use stablegrad::optim::{ReferenceScale, StableGradConfig};
use stablegrad::residuals::{evaluate, sample_batch, BatchSizes};
use stablegrad::{Error, ProblemSpec};

fn split(cols: usize, parts: usize, rng: &mut SeededRng) -> Vec<Range<usize>> {
    // `parts` non-empty contiguous blocks
    let mut cuts: Vec<usize> = (1..cols).collect();
    for i in (1..cuts.len()).rev() {
        cuts.swap(i, rng.below(i + 1));
    }
    let mut c: Vec<usize> = cuts.into_iter().take(parts - 1).collect();
    c.sort_unstable();
    let mut edges = vec![0];
    edges.extend(c);
    edges.push(cols);
    edges.windows(2).map(|w| w[0]..w[1]).collect()
}

fn random_instance(rows: usize, cols: usize, parts: usize, rng: &mut SeededRng) -> (JacobianBlocks, AlphaBlocks) {
    let j = DenseMatrix::from_fn(rows, cols, |_, _| rng.normal());
    let r = DenseVector::from(rng.normal_vec(rows));
    let blocks = split(cols, parts, rng);
    let alphas = (0..parts).map(|_| (rng.uniform(-3.0, 3.0)).exp()).collect();
    let jb = JacobianBlocks::new(j, r, blocks.clone()).unwrap();
    (jb, AlphaBlocks::new(alphas, blocks).unwrap())
}

fn jpjt(jb: &JacobianBlocks, a: &AlphaBlocks) -> DenseMatrix {
    let d = a.diagonal();
    let j = &jb.jacobian;
    DenseMatrix::from_fn(j.rows(), j.rows(), |p, q| (0..j.cols()).map(|c| j[(p, c)] * d[c] * j[(q, c)]).sum())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn effective_kernel_is_the_block_sum(seed in any::<u64>(), rows in 1usize..12, cols in 4usize..20, parts in 1usize..4) {
        let mut rng = SeededRng::new(seed);
        let (jb, a) = random_instance(rows, cols, parts.min(cols), &mut rng);
        let dense = jpjt(&jb, &a);
        let mut sum = DenseMatrix::zeros(rows, rows);
        for (l, al) in a.alphas.iter().enumerate() {
            let jl = jb.block(l);
            let k = jl.matmul(&jl.transpose()).unwrap();
            for (s, v) in sum.as_mut_slice().iter_mut().zip(k.as_slice()) {
                *s += al * v;
            }
        }
        let scale = dense.as_slice().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (x, y) in dense.as_slice().iter().zip(sum.as_slice()) {
            prop_assert!((x - y).abs() < 1e-10 * scale);
        }
    }

    #[test]
    fn rayleigh_shift_identity(seed in any::<u64>(), rows in 1usize..50, cols in 5usize..40, parts in 1usize..6) {
        let mut rng = SeededRng::new(seed);
        let (jb, a) = random_instance(rows, cols, parts.min(cols), &mut rng);
        let rho = rayleigh_k(&jb).unwrap();
        let rho_sg = rayleigh_ksg(&jb, &a).unwrap();
        let rr = norm2(&jb.residual).powi(2);
        let shift: f64 = jb.block_sq_norms().iter().zip(&a.alphas).map(|(g, al)| (al - 1.0) * g).sum::<f64>() / rr;
        prop_assert!(((rho_sg - rho) - shift).abs() < 1e-10 * (1.0 + rho_sg.abs()));
        // matrix-free against dense assembly
        let k_dense = jb.jacobian.matmul(&jb.jacobian.transpose()).unwrap();
        let rho_dense = rayleigh_dense(&k_dense, &jb.residual).unwrap();
        let rho_sg_dense = rayleigh_dense(&jpjt(&jb, &a), &jb.residual).unwrap();
        prop_assert!((rho - rho_dense).abs() < 1e-10 * (1.0 + rho));
        prop_assert!((rho_sg - rho_sg_dense).abs() < 1e-10 * (1.0 + rho_sg));
        prop_assert!(rho >= 0.0 && rho_sg >= 0.0);
    }

    #[test]
    fn update_geometry_matches_direct_formulas(seed in any::<u64>(), n in 4usize..40, parts in 1usize..5) {
        let mut rng = SeededRng::new(seed);
        let theta = rng.normal_vec(n);
        let delta = rng.normal_vec(n);
        let blocks = split(n, parts.min(n), &mut rng);
        let g = update_geometry(&theta, &delta, &blocks, 1e-8).unwrap();
        let e: Vec<f64> = blocks.iter().map(|b| delta[b.clone()].iter().map(|d| d * d).sum()).collect();
        let rel: Vec<f64> = blocks
            .iter()
            .map(|b| norm2(&delta[b.clone()]) / norm2(&theta[b.clone()]))
            .collect();
        let conc = e.iter().cloned().fold(0.0, f64::max) / e.iter().sum::<f64>();
        let ratio = rel.iter().cloned().fold(0.0, f64::max) / rel.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert!((g.max_energy_concentration - conc).abs() < 1e-12);
        prop_assert!((g.valid_relative_update_ratio - ratio).abs() < 1e-12 * ratio);
    }
}

#[test]
fn identity_preconditioner_and_unit_kernel() {
    let mut rng = SeededRng::new(1);
    let (jb, a) = random_instance(8, 12, 3, &mut rng);
    let ones = AlphaBlocks::uniform(1.0, a.blocks.clone()).unwrap();
    assert_eq!(rayleigh_ksg(&jb, &ones).unwrap(), rayleigh_k(&jb).unwrap());
    let c = local_decrease_check(&jb.jacobian, &ones, &jb.residual, 0.01).unwrap();
    assert_eq!(c.delta_sg, c.delta_std);
    let c = local_decrease_check(&jb.jacobian, &a, &jb.residual, 0.0).unwrap();
    assert_eq!((c.delta_std, c.delta_sg), (0.0, 0.0));
    // K = I: rows of J are orthonormal
    let j = DenseMatrix::identity(5);
    let unit = JacobianBlocks::new(j, DenseVector::from(rng.normal_vec(5)), vec![0..5]).unwrap();
    assert!((rayleigh_k(&unit).unwrap() - 1.0).abs() < 1e-14);
    assert!(matches!(
        rayleigh_k(&JacobianBlocks::new(DenseMatrix::identity(2), DenseVector::zeros(2), vec![0..2]).unwrap()),
        Err(Error::Domain(_))
    ));
}

#[test]
fn lambda_max_matches_dense_eigensolver() {
    let cfg = PowerIterationConfig { tol: 1e-13, max_iter: 100_000 };
    let mut rng = SeededRng::new(2);
    for _ in 0..20 {
        let (jb, a) = random_instance(20, 30, 4, &mut rng);
        let dense = *symmetric_eigenvalues(&jpjt(&jb, &a)).unwrap().last().unwrap();
        let mf = lambda_max_ksg(&jb, &a, &cfg, &mut rng).unwrap();
        assert!((mf - dense).abs() < 1e-6 * dense, "{mf} vs {dense}");
    }
    let (jb, a) = random_instance(20, 30, 3, &mut rng);
    let k = lambda_max_k(&jb, &cfg, &mut SeededRng::new(9)).unwrap();
    let ones = AlphaBlocks::uniform(1.0, a.blocks.clone()).unwrap();
    assert_eq!(lambda_max_ksg(&jb, &ones, &cfg, &mut SeededRng::new(9)).unwrap(), k);
    let four = AlphaBlocks::uniform(4.0, a.blocks).unwrap();
    let k4 = lambda_max_ksg(&jb, &four, &cfg, &mut SeededRng::new(9)).unwrap();
    assert!((k4 - 4.0 * k).abs() < 1e-9 * k);
}

#[test]
fn theorem_condition_implies_larger_decrease() {
    let mut rng = SeededRng::new(3);
    let mut filtered = 0;
    let mut tried = 0;
    while filtered < 500 {
        tried += 1;
        let rows = 2 + rng.below(29);
        let cols = 4 + rng.below(27);
        let parts = 1 + rng.below(4);
        let (jb, a) = random_instance(rows, cols, parts, &mut rng);
        let eta = 10f64.powf(rng.uniform(-4.0, -0.5));
        let c = local_decrease_check(&jb.jacobian, &a, &jb.residual, eta).unwrap();
        if c.theorem_holds {
            filtered += 1;
            assert!(c.decrease_holds, "counterexample {c:?}");
        }
    }
    assert!(tried < 100_000);
}

fn burgers_setup(seed: u64) -> (stablegrad::MlpNetwork, ProblemSpec, stablegrad::residuals::CollocationBatch) {
    let mut rng = SeededRng::new(seed);
    let net = random_net(2, 2, 6, Activation::Tanh, None, &mut rng);
    let spec = ProblemSpec::burgers(0.05);
    let batch = sample_batch(&spec, BatchSizes { pde: 12, bc: 4, ic: 4 }, &mut rng).unwrap();
    (net, spec, batch)
}

#[test]
fn jacobian_is_consistent_with_gradient_and_finite_differences() {
    let (net, spec, batch) = burgers_setup(4);
    let jb = assemble_jacobian(&net, &spec, &batch, BlockMode::PerLayerJoint, DEFAULT_JACOBIAN_CAP).unwrap();
    assert_eq!(jb.jacobian.rows(), 20);
    let g = evaluate(&spec, &net, &batch).unwrap().gradient(&net).unwrap();
    let jtr = jb.gradient();
    for (x, y) in jtr.iter().zip(g.grads.flat()) {
        assert!((x - y).abs() < 1e-10 * (1.0 + y.abs()));
    }
    for row in [0, 7, 13, 19] {
        let fd = fd_param_gradient(&net, 1e-5, |n| evaluate(&spec, n, &batch).unwrap().residual.entries[row]);
        let exact: Vec<f64> = (0..net.num_params()).map(|c| jb.jacobian[(row, c)]).collect();
        let diff: Vec<f64> = exact.iter().zip(&fd).map(|(a, b)| a - b).collect();
        assert!(norm2(&diff) < 1e-6 * norm2(&exact).max(1e-3), "row {row}");
    }
    assert!(matches!(
        assemble_jacobian(&net, &spec, &batch, BlockMode::PerLayerJoint, 100),
        Err(Error::Config(m)) if m.contains("smaller diagnostic batch")
    ));
}

#[test]
fn linearization_error_vanishes_for_linear_models_and_shrinks_with_the_step() {
    // a single affine layer makes the Poisson residual affine in θ
    let mut rng = SeededRng::new(5);
    let net = random_net(2, 0, 1, Activation::Identity, None, &mut rng);
    let spec = ProblemSpec::poisson();
    let batch = sample_batch(&spec, BatchSizes { pde: 10, bc: 6, ic: 0 }, &mut rng).unwrap();
    let delta = rng.normal_vec(net.num_params());
    assert!(linearization_error(&net, &spec, &batch, &delta).unwrap() < 1e-12);

    let (net, spec, batch) = burgers_setup(6);
    let delta: Vec<f64> = rng.normal_vec(net.num_params()).iter().map(|d| 1e-2 * d).collect();
    let mut last = linearization_error(&net, &spec, &batch, &delta).unwrap();
    for k in 1..4 {
        let half: Vec<f64> = delta.iter().map(|d| d / 2f64.powi(k)).collect();
        let e = linearization_error(&net, &spec, &batch, &half).unwrap();
        assert!(e <= 0.5 * last * 1.05, "{e} vs {last}");
        last = e;
    }
}

#[test]
fn checkpoint_measurements_are_internally_consistent() {
    let (net, spec, batch) = burgers_setup(7);
    let setup = DiagnosticSetup {
        spec,
        batch,
        stablegrad: StableGradConfig {
            reference_scale: ReferenceScale::ResidualStd,
            ..StableGradConfig::default()
        },
        power: PowerIterationConfig { tol: 1e-12, max_iter: 100_000 },
        cap: DEFAULT_JACOBIAN_CAP,
    };
    let eta = 1e-3;
    let d = setup.measure(&net, 0, eta, None, &mut SeededRng::new(1)).unwrap();
    assert_eq!(d.s_sg, eta * d.lambda_max_ksg);
    assert!(d.r_std_scaled >= 1.0 && d.r_std_scaled < 1.0 + 1e-6);
    assert!(d.r_std_raw > 1.0);
    assert!(d.e_lin.is_none());
    assert!((d.margin_sg - (d.rho_sg * (1.0 - 0.5 * d.s_sg) - d.rho)).abs() < 1e-12 * d.rho.max(1.0));
    assert!(d.lambda_max_k >= d.rho * (1.0 - 1e-9));
}
