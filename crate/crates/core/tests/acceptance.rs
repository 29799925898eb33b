//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Criteria 1–7 and 12 are identities, oracle comparisons and contracts;
//! the target fails if any of them does. Criteria 8–11 are desk-scale
//! training experiments whose direction is reported here but not enforced.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use common::{fd_param_gradient, max_rel_err, random_net};
use stablegrad::diagnostics::{
    lambda_max_ksg, local_decrease_check, rayleigh_dense, r_std_ratio, AlphaBlocks, JacobianBlocks,
};
use stablegrad::harness::{lr_control_configs, preset, run_scaleflow, run_train, ExperimentConfig, RunResult, ScaleflowConfig};
use stablegrad::linalg::{dot, norm2, norm2_sq, DenseMatrix, DenseVector, PowerIterationConfig, SeededRng};
use stablegrad::network::{Activation, BlockMode, DerivativeOrder, FourierFeatures, GradientBlocks, Initializer};
use stablegrad::optim::{stablegrad_rescale, MultiplierTable, Preprocessor, ReferenceScale, StableGradConfig};
use stablegrad::residuals::{evaluate, sample_batch, BatchSizes};
use stablegrad::{MlpNetwork, ProblemSpec};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

struct Suite {
    only: Vec<usize>,
    enforced_failures: Vec<usize>,
}

impl Suite {
    fn run(&mut self, n: usize, title: &str, budget: Duration, enforced: bool, f: impl FnOnce() -> Verdict) {
        if !self.only.is_empty() && !self.only.contains(&n) {
            return;
        }
        let t0 = Instant::now();
        let v = f();
        let took = t0.elapsed();
        let in_time = took <= budget;
        let pass = v.pass && in_time;
        println!(
            "criterion {n:>2} {}  {title}: {}; {:.1} s of {} s{}",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            took.as_secs_f64(),
            budget.as_secs(),
            if in_time { "" } else { " (over budget)" }
        );
        if !pass && enforced {
            self.enforced_failures.push(n);
        }
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn gradient_exactness() -> Verdict {
    let benches: [(ProblemSpec, usize, Option<FourierFeatures>); 3] = [
        (ProblemSpec::burgers(0.05), 2, None),
        (ProblemSpec::poisson(), 2, None),
        (ProblemSpec::helmholtz(10.0 * std::f64::consts::PI, 10.0), 3, Some(FourierFeatures::integer(3, 2))),
    ];
    let mut worst = 0.0f64;
    let mut max_params = 0;
    for (spec, coords, fourier) in benches {
        for seed in 0..20 {
            let mut rng = SeededRng::new(1000 + seed);
            let net = random_net(coords, 2, 8, Activation::Tanh, fourier.clone(), &mut rng);
            max_params = max_params.max(net.num_params());
            let ic = if spec.has_ic() { 6 } else { 0 };
            let batch = sample_batch(&spec, BatchSizes { pde: 12, bc: 6, ic }, &mut rng).unwrap();
            let exact = evaluate(&spec, &net, &batch).unwrap().gradient(&net).unwrap();
            let fd = fd_param_gradient(&net, 1e-5, |n| evaluate(&spec, n, &batch).unwrap().residual.loss());
            worst = worst.max(max_rel_err(exact.grads.flat(), &fd));
        }
    }
    verdict(
        worst < 1e-6 && max_params <= 500,
        format!("max relative error {worst:.2e} over 60 nets of at most {max_params} parameters"),
    )
}

fn derivative_channels() -> Verdict {
    let h = 1e-3;
    let mut rng = SeededRng::new(2);
    let acts = [Activation::Tanh, Activation::Silu];
    let (mut worst_first, mut worst_second) = (0.0f64, 0.0f64);
    let (mut kept, mut skipped) = (0, 0);
    let value = |net: &MlpNetwork, x: &[f64]| {
        let m = DenseMatrix::from_vec(1, x.len(), x.to_vec()).unwrap();
        net.forward(&m, DerivativeOrder::Value).unwrap().value(0)
    };
    while kept < 1000 {
        let coords = 1 + rng.below(3);
        let act = acts[rng.below(2)];
        let net = random_net(coords, 1 + rng.below(3), 4 + rng.below(12), act, None, &mut rng);
        let x: Vec<f64> = (0..coords).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let tr = net
            .forward(&DenseMatrix::from_vec(1, coords, x.clone()).unwrap(), DerivativeOrder::Second)
            .unwrap();
        let c = rng.below(coords);
        let (u, ux, uxx) = (tr.value(0), tr.first(c, 0), tr.second(c, 0));
        // the stencil rounding floor is about 1e-16 |u| / h²; skip points where
        // a derivative is small enough for it to dominate
        let floor = 1e-3 * u.abs().max(1e-3);
        if ux.abs() < floor || uxx.abs() < floor {
            skipped += 1;
            continue;
        }
        kept += 1;
        let at = |k: f64| {
            let mut y = x.clone();
            y[c] += k * h;
            value(&net, &y)
        };
        // fourth-order central stencils
        let (m2, m1, z, p1, p2) = (at(-2.0), at(-1.0), at(0.0), at(1.0), at(2.0));
        let d1 = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h);
        let d2 = (-m2 + 16.0 * m1 - 30.0 * z + 16.0 * p1 - p2) / (12.0 * h * h);
        worst_first = worst_first.max((d1 - ux).abs() / ux.abs());
        worst_second = worst_second.max((d2 - uxx).abs() / uxx.abs());
    }
    verdict(
        worst_first < 1e-6 && worst_second < 1e-6,
        format!(
            "max relative error u_x {worst_first:.2e}, u_xx {worst_second:.2e} over {kept} pairs ({skipped} skipped near a zero derivative)"
        ),
    )
}

fn split(cols: usize, parts: usize, rng: &mut SeededRng) -> Vec<std::ops::Range<usize>> {
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

/// Random dense instance with positive block factors spread over e^±3.
fn instance(rows: usize, cols: usize, parts: usize, rng: &mut SeededRng) -> (JacobianBlocks, AlphaBlocks) {
    let j = DenseMatrix::from_fn(rows, cols, |_, _| rng.normal());
    let r = DenseVector::from(rng.normal_vec(rows));
    let blocks = split(cols, parts, rng);
    let alphas = (0..parts).map(|_| rng.uniform(-3.0, 3.0).exp()).collect();
    (JacobianBlocks::new(j, r, blocks.clone()).unwrap(), AlphaBlocks::new(alphas, blocks).unwrap())
}

fn dense_ksg(jb: &JacobianBlocks, a: &AlphaBlocks) -> DenseMatrix {
    let d = a.diagonal();
    let j = &jb.jacobian;
    DenseMatrix::from_fn(j.rows(), j.rows(), |p, q| (0..j.cols()).map(|c| j[(p, c)] * d[c] * j[(q, c)]).sum())
}

fn rayleigh_identity() -> Verdict {
    let mut rng = SeededRng::new(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let rows = 1 + rng.below(50);
        let cols = 5 + rng.below(40);
        let parts = 1 + rng.below(5);
        let (jb, a) = instance(rows, cols, parts, &mut rng);
        let k = jb.jacobian.matmul(&jb.jacobian.transpose()).unwrap();
        let rho = rayleigh_dense(&k, &jb.residual).unwrap();
        let rho_sg = rayleigh_dense(&dense_ksg(&jb, &a), &jb.residual).unwrap();
        let jt = jb.jacobian.transpose();
        let shift: f64 = jb
            .blocks
            .iter()
            .zip(&a.alphas)
            .map(|(b, al)| {
                let gl: f64 = b.clone().map(|c| dot(jt.row(c), &jb.residual).unwrap().powi(2)).sum();
                (al - 1.0) * gl
            })
            .sum::<f64>()
            / norm2_sq(&jb.residual);
        worst = worst.max(((rho_sg - rho) - shift).abs());
    }
    verdict(worst < 1e-10, format!("max deviation {worst:.2e} over 1000 instances"))
}

fn theorem_verification() -> Verdict {
    let mut rng = SeededRng::new(4);
    let (mut filtered, mut tried, mut exceptions) = (0usize, 0usize, 0usize);
    while filtered < 10_000 {
        tried += 1;
        let rows = 2 + rng.below(29);
        let cols = 4 + rng.below(27);
        let parts = 1 + rng.below(4);
        let (jb, a) = instance(rows, cols, parts, &mut rng);
        let eta = 10f64.powf(rng.uniform(-4.0, -0.5));
        let c = local_decrease_check(&jb.jacobian, &a, &jb.residual, eta).unwrap();
        if c.theorem_holds {
            filtered += 1;
            if !c.decrease_holds {
                exceptions += 1;
            }
        }
    }
    verdict(
        exceptions == 0,
        format!("{exceptions} exceptions among {filtered} filtered instances ({tried} drawn)"),
    )
}

fn rescale_postconditions() -> Verdict {
    let mut rng = SeededRng::new(5);
    let arch = stablegrad::network::ArchitectureConfig {
        hidden_layers: 4,
        width: 12,
        activation: Activation::Tanh,
        // two outputs so that the per-tensor output bias has a defined std
        output_dim: 2,
        fourier: None,
        norm: None,
    };
    let layout = MlpNetwork::from_config(2, &arch).unwrap().param_layout();
    let (mut std_dev, mut norm_dev, mut ip_dev) = (0.0f64, 0.0f64, 0.0f64);
    let mut printed_ok = true;
    for _ in 0..200 {
        let mode = if rng.below(2) == 0 { BlockMode::PerLayerJoint } else { BlockMode::PerTensor };
        let mut values = vec![0.0; layout.len()];
        for b in layout.blocks(mode) {
            let s = 10f64.powf(rng.uniform(-4.0, 1.0));
            for v in &mut values[b] {
                *v = s * rng.normal();
            }
        }
        let g = GradientBlocks::new(values, layout.clone()).unwrap();
        let sigma_out = 10f64.powf(rng.uniform(-3.0, 0.0));
        let cfg = StableGradConfig { block_mode: mode, ..StableGradConfig::default() };
        let out = stablegrad_rescale(&g, sigma_out, &cfg).unwrap();
        for b in layout.blocks(mode) {
            let x = &out.grads.flat()[b];
            let m = x.iter().sum::<f64>() / x.len() as f64;
            let s = (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt();
            std_dev = std_dev.max((s - sigma_out).abs() / sigma_out);
        }
        let ratio = r_std_ratio(&out.grads.block_stds(mode));
        printed_ok &= format!("{ratio:.2}") == "1.00" && (ratio - 1.0).abs() < 1e-6;

        let gn = norm2(g.flat());
        for (scale, dev) in [(ReferenceScale::NormPreserving, &mut norm_dev), (ReferenceScale::InnerProductPreserving, &mut ip_dev)] {
            let out = stablegrad_rescale(&g, sigma_out, &StableGradConfig { reference_scale: scale, ..cfg }).unwrap();
            let d = match scale {
                ReferenceScale::NormPreserving => (norm2(out.grads.flat()) - gn).abs() / gn,
                _ => (dot(g.flat(), out.grads.flat()).unwrap() - gn * gn).abs() / (gn * gn),
            };
            *dev = dev.max(d);
        }
    }
    verdict(
        std_dev < 1e-6 && printed_ok && norm_dev < 1e-10 && ip_dev < 1e-10,
        format!(
            "block std deviation {std_dev:.1e}, R_std scaled prints 1.00: {printed_ok}, norm {norm_dev:.1e}, inner product {ip_dev:.1e}"
        ),
    )
}

fn spectral_oracle() -> Verdict {
    let mut rng = SeededRng::new(6);
    let cfg = PowerIterationConfig { tol: 1e-13, max_iter: 200_000 };
    let mut worst = 0.0f64;
    let mut largest = 0;
    for _ in 0..100 {
        let rows = 5 + rng.below(56);
        let cols = 10 + rng.below(1991);
        largest = largest.max(cols);
        let (jb, a) = instance(rows, cols, 1 + rng.below(6), &mut rng);
        let mf = lambda_max_ksg(&jb, &a, &cfg, &mut rng).unwrap();
        let dense = common::dense_lambda_max(&dense_ksg(&jb, &a));
        worst = worst.max((mf - dense).abs() / dense);
    }
    verdict(
        worst < 1e-6,
        format!("max relative error {worst:.2e} over 100 instances up to {largest} parameters"),
    )
}

fn ratio(v: impl Iterator<Item = f64> + Clone) -> f64 {
    v.clone().fold(0.0, f64::max) / v.fold(f64::INFINITY, f64::min)
}

fn figure1_directions() -> Verdict {
    let base = ScaleflowConfig::standard(0);
    let fan_in = run_scaleflow(&base).unwrap();
    let fan_out = run_scaleflow(&ScaleflowConfig { init: Initializer::fan_out(), ..base.clone() }).unwrap();
    let sg = run_scaleflow(&ScaleflowConfig {
        preprocessor: Preprocessor::StableGrad(StableGradConfig::default()),
        ..base
    })
    .unwrap();
    let acts_ok = fan_in.iter().all(|r| (0.2..=5.0).contains(&r.activation_std));
    let raw = ratio(fan_in.iter().map(|r| r.weight_grad_std_raw));
    let post = ratio(sg.iter().map(|r| r.weight_grad_std_post));
    let last_in = fan_in.last().unwrap().activation_std;
    let last_out = fan_out.last().unwrap().activation_std;
    verdict(
        acts_ok && raw > 10.0 && (post - 1.0).abs() < 1e-6 && last_out > last_in,
        format!(
            "(a) activation stds in [0.2, 5]: {acts_ok}, raw ratio {raw:.1}; (b) post ratio 1{:+.1e}; (c) final activation std fan-out {last_out:.3} vs fan-in {last_in:.3}",
            post - 1.0
        ),
    )
}

fn final_val(r: &RunResult) -> f64 {
    r.summary.validation.map_or(f64::INFINITY, |v| v.loss)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

struct DeskRuns {
    cfg: ExperimentConfig,
    stable: Vec<RunResult>,
    plain: Vec<RunResult>,
}

fn desk_ab(out: &Path) -> (Verdict, DeskRuns) {
    let base = preset("burgers-desk").unwrap();
    let mut stable = Vec::new();
    let mut plain = Vec::new();
    for seed in 0..3 {
        let mut c = base.clone();
        c.seed = seed;
        stable.push(run_train(&c, Some(&out.join(format!("stablegrad_{seed}"))), None).unwrap());
        let p = c.clone().with_preprocessor(Preprocessor::None);
        plain.push(run_train(&p, Some(&out.join(format!("plain_{seed}"))), None).unwrap());
    }
    let sg: Vec<f64> = stable.iter().map(final_val).collect();
    let pl: Vec<f64> = plain.iter().map(final_val).collect();
    let (msg, mpl) = (mean(&sg), mean(&pl));
    let steps = base.total_steps();
    let points = stable[0].summary.validation_curve.len();
    let reach = (0..points).find_map(|i| {
        let m = mean(&stable.iter().map(|r| r.summary.validation_curve[i].loss).collect::<Vec<_>>());
        (m <= mpl).then_some(stable[0].summary.validation_curve[i].steps)
    });
    let v = verdict(
        msg <= 0.8 * mpl && reach.is_some_and(|s| 2 * s <= steps),
        format!(
            "mean final validation loss StableGrad {msg:.3e} vs AdamW {mpl:.3e} (ratio {:.2}, needs <= 0.80); \
             StableGrad mean curve reaches AdamW's final loss at {} of {steps} steps; per seed {:?} vs {:?}",
            msg / mpl,
            reach.map_or("no step".to_string(), |s| s.to_string()),
            sg.iter().map(|x| format!("{x:.2e}")).collect::<Vec<_>>(),
            pl.iter().map(|x| format!("{x:.2e}")).collect::<Vec<_>>(),
        ),
    );
    (v, DeskRuns { cfg: base, stable, plain })
}

fn diagnostic_run(desk: &DeskRuns, out: &Path) -> Verdict {
    let mut c = preset("burgers-diag").unwrap();
    c.seed = 0;
    let r = run_train(&c, Some(&out.join("diagnose")), None).unwrap();
    let same_trajectory = r.records.iter().map(|x| &x.step).eq(desk.stable[0].records.iter().map(|x| &x.step));
    let d = r.diagnostics();
    let s_max = d.iter().map(|(k, _)| k.s_sg).fold(0.0, f64::max);
    let e_max = d.iter().filter_map(|(k, _)| k.e_lin).fold(0.0, f64::max);
    let e_max_after_init = d.iter().filter(|(k, _)| k.epoch > 0).filter_map(|(k, _)| k.e_lin).fold(0.0, f64::max);
    let positive = d.iter().filter(|(k, _)| k.margin_sg > 0.0).count();
    let frac = positive as f64 / d.len() as f64;
    verdict(
        same_trajectory && s_max < 0.5 && e_max < 1e-2 && frac >= 0.6,
        format!(
            "{} checkpoints on the criterion-8 seed-0 trajectory ({same_trajectory}); max s_SG {s_max:.3} (< 0.5); \
             max E_lin {e_max:.2e}, {e_max_after_init:.2e} after init (< 1e-2); M_SG > 0 at {positive} ({:.0}%, needs >= 60%)",
            d.len(),
            100.0 * frac
        ),
    )
}

fn lr_control(desk: &DeskRuns, out: &Path) -> Verdict {
    let mut c = desk.cfg.clone();
    c.seed = 0;
    let arms = lr_control_configs(&c, &MultiplierTable::table3()).unwrap();
    // plain and StableGrad arms are the seed-0 runs of criterion 8
    assert_eq!(arms[0].1, c.clone().with_preprocessor(Preprocessor::None));
    assert_eq!(arms[2].1, c);
    let boosted = run_train(&arms[1].1, Some(&out.join("boosted_0")), None).unwrap();
    let (pl, sg) = (&desk.plain[0], &desk.stable[0]);
    let (lp, lb, ls) = (final_val(pl), final_val(&boosted), final_val(sg));
    let conc = |r: &RunResult| r.final_geometry.map_or(f64::NAN, |g| g.max_energy_concentration);
    let (cb, cs) = (conc(&boosted), conc(sg));
    verdict(
        lb < lp && ls < lb && cs < cb,
        format!(
            "final validation loss plain {lp:.3e}, boosted {lb:.3e}, StableGrad {ls:.3e}; \
             max update-energy concentration boosted {cb:.3}, StableGrad {cs:.3}"
        ),
    )
}

fn sign_baseline(desk: &DeskRuns, out: &Path) -> Verdict {
    let mut c = desk.cfg.clone().with_preprocessor(Preprocessor::Sign);
    c.seed = 0;
    let r = run_train(&c, Some(&out.join("sign_0")), None).unwrap();
    let sg = final_val(&desk.stable[0]);
    match &r.summary.aborted {
        Some(reason) => verdict(true, format!("sign run aborted: {reason}")),
        None => {
            let l = final_val(&r);
            verdict(
                l >= 10.0 * sg,
                format!("final validation loss sign {l:.3e} vs StableGrad {sg:.3e} (ratio {:.1}, needs >= 10)", l / sg),
            )
        }
    }
}

fn determinism(desk: &DeskRuns, out: &Path) -> Verdict {
    let mut c = desk.cfg.clone();
    c.seed = 0;
    let again = out.join("stablegrad_0_rerun");
    run_train(&c, Some(&again), None).unwrap();
    let a = std::fs::read(out.join("stablegrad_0/metrics.jsonl")).unwrap();
    let b = std::fs::read(again.join("metrics.jsonl")).unwrap();
    verdict(a == b && !a.is_empty(), format!("{} bytes, identical: {}", a.len(), a == b))
}

fn main() {
    // `cargo test -- --list` and friends pass flags; list nothing for them
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let out = tempfile::tempdir().unwrap();
    // numeric arguments select a subset of criteria
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut suite = Suite {
        only,
        enforced_failures: Vec::new(),
    };
    suite.run(1, "gradient exactness", secs(60), true, gradient_exactness);
    suite.run(2, "derivative-channel exactness", secs(60), true, derivative_channels);
    suite.run(3, "Rayleigh quotient shift identity", secs(30), true, rayleigh_identity);
    suite.run(4, "local decrease theorem", secs(120), true, theorem_verification);
    suite.run(5, "rescaling post-conditions", secs(60), true, rescale_postconditions);
    suite.run(6, "spectral oracle", secs(120), true, spectral_oracle);
    suite.run(7, "scale-flow directions", secs(60), true, figure1_directions);

    if suite.only.is_empty() || suite.only.iter().any(|k| (8..=12).contains(k)) {
        // criteria 9 to 12 reuse the runs of criterion 8
        let mut desk = None;
        suite.run(8, "desk Burgers A/B", secs(15 * 60), false, || {
            let (v, d) = desk_ab(out.path());
            desk = Some(d);
            v
        });
        let desk = desk.unwrap_or_else(|| desk_ab(out.path()).1);
        suite.run(9, "diagnostic-run properties", secs(15 * 60), false, || diagnostic_run(&desk, out.path()));
        suite.run(10, "learning-rate schedule control", secs(15 * 60), false, || lr_control(&desk, out.path()));
        suite.run(11, "sign baseline", secs(5 * 60), false, || sign_baseline(&desk, out.path()));
        suite.run(12, "determinism", secs(5 * 60), true, || determinism(&desk, out.path()));
    }

    if !suite.enforced_failures.is_empty() {
        eprintln!("enforced criteria failed: {:?}", suite.enforced_failures);
        std::process::exit(1);
    }
}
