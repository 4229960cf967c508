use nalgebra::DMatrix;
use numcore::{ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stglow::flow::{AffineCoupling, BaseDensity, FlowConfig, FlowStack, InvertibleLinear, PatternNorm};
use stglow::pipeline::check::perturb_flow;
use stglow::Error;

fn normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(&[rows, cols], |_| rng.sample::<f64, _>(StandardNormal))
}

/// Central-difference Jacobian of a map on one row, `out × in`.
fn jacobian(x: &[f64], f: impl Fn(&[f64]) -> Vec<f64>) -> DMatrix<f64> {
    let h = 1e-6;
    let n = x.len();
    let m = f(x).len();
    let mut j = DMatrix::zeros(m, n);
    for c in 0..n {
        let mut up = x.to_vec();
        let mut down = x.to_vec();
        up[c] += h;
        down[c] -= h;
        let (fu, fd) = (f(&up), f(&down));
        for r in 0..m {
            j[(r, c)] = (fu[r] - fd[r]) / (2.0 * h);
        }
    }
    j
}

fn log_abs_det(j: &DMatrix<f64>) -> f64 {
    j.clone().lu().determinant().abs().ln()
}

fn row(x: &[f64]) -> Tensor {
    Tensor::new(vec![1, x.len()], x.to_vec()).unwrap()
}

fn flow(config: &FlowConfig, cond_dim: usize, seed: u64, scale: f64) -> (FlowStack, ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut flow = FlowStack::new(&mut store, "flow", config, cond_dim, &mut rng).unwrap();
    perturb_flow(&mut store, scale, &mut rng);
    flow.mark_initialized();
    (flow, store)
}

fn identity_flow(channels: usize, steps: usize) -> (FlowStack, ParamStore) {
    let config = FlowConfig {
        channels,
        steps,
        coupling_hidden: 8,
        factor_out: false,
        ..FlowConfig::default()
    };
    let mut store = ParamStore::new();
    let mut flow = FlowStack::new(&mut store, "flow", &config, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for s in flow.steps() {
        store.set(s.linear.weight(), Tensor::eye(channels)).unwrap();
    }
    flow.mark_initialized();
    (flow, store)
}

#[test]
fn pattern_norm_whitens_a_shifted_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = Tensor::from_fn(&[512, 3], |_| 3.0 + 2.0 * rng.sample::<f64, _>(StandardNormal));
    let mut store = ParamStore::new();
    let mut pn = PatternNorm::new(&mut store, "pn", 3);
    pn.initialize(&mut store, &batch).unwrap();
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(batch).unwrap();
    let (y, _) = pn.forward(&mut tape, x).unwrap();
    let y = tape.value(y);
    for c in 0..3 {
        let col: Vec<f64> = (0..512).map(|i| y.get2(i, c)).collect();
        let mean = col.iter().sum::<f64>() / 512.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 512.0;
        assert!(mean.abs() < 1e-12 && (var.sqrt() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn pattern_norm_leaves_a_standard_batch_nearly_alone() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = normal(20_000, 2, &mut rng);
    let mut store = ParamStore::new();
    let mut pn = PatternNorm::new(&mut store, "pn", 2);
    pn.initialize(&mut store, &batch).unwrap();
    for &s in store.get(pn.scale()).data() {
        assert!((s - 1.0).abs() < 0.03);
    }
    for &b in store.get(pn.bias()).data() {
        assert!(b.abs() < 0.03);
    }
}

#[test]
fn pattern_norm_rejects_a_constant_channel() {
    let batch = Tensor::from_fn(&[8, 2], |i| if i % 2 == 0 { 4.0 } else { i as f64 });
    let mut store = ParamStore::new();
    let mut pn = PatternNorm::new(&mut store, "pn", 2);
    assert!(matches!(
        pn.initialize(&mut store, &batch),
        Err(Error::DegenerateChannel { channel: 0, .. })
    ));
}

#[test]
fn pattern_norm_scaling_by_two_gives_c_log_two() {
    let mut store = ParamStore::new();
    let mut pn = PatternNorm::new(&mut store, "pn", 3);
    pn.mark_initialized();
    store.set(pn.scale(), Tensor::full(&[3], 2.0)).unwrap();
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(Tensor::zeros(&[1, 3])).unwrap();
    let (_, ld) = pn.forward(&mut tape, x).unwrap();
    assert!((tape.value(ld).data()[0] - 3.0 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn invertible_linear_log_dets() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lin = InvertibleLinear::new(&mut store, "w", 3, &mut rng);
    assert!(lin.check(store.get(lin.weight()), 0).unwrap().abs() < 1e-9);
    let two = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 2.0 } else { 0.0 });
    assert!((lin.check(&two, 0).unwrap() - 3.0 * 2f64.ln()).abs() < 1e-12);
    assert!(lin.check(&Tensor::eye(3), 0).unwrap().abs() < 1e-15);
    let singular = Tensor::from_fn(&[3, 3], |i| (i / 3) as f64);
    assert!(matches!(lin.check(&singular, 4), Err(Error::SingularWeight { step: 4, .. })));
}

#[test]
fn coupling_jacobian_is_block_triangular_and_matches_log_det() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let coupling = AffineCoupling::new(&mut store, "cp", 6, 2, 8, &mut rng).unwrap();
        perturb_flow(&mut store, 0.5, &mut rng);
        // the output layer name does not carry the flow prefix here
        let out = coupling.out_layer();
        for id in [out.weight(), out.bias()] {
            let t = Tensor::from_fn(store.get(id).shape(), |_| rng.random_range(-0.5..0.5));
            store.set(id, t).unwrap();
        }
        let x: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
        let cond = normal(1, 2, &mut rng);
        let run = |v: &[f64]| {
            let mut tape = Tape::with_params(&store);
            let xv = tape.constant(row(v)).unwrap();
            let cv = tape.constant(cond.clone()).unwrap();
            let (y, ld) = coupling.forward(&mut tape, xv, cv).unwrap();
            (tape.value(y).data().to_vec(), tape.value(ld).data()[0])
        };
        let j = jacobian(&x, |v| run(v).0);
        for r in 0..3 {
            for c in 0..6 {
                let expected = if r == c { 1.0 } else { 0.0 };
                assert!((j[(r, c)] - expected).abs() < 1e-8, "pass-through block at ({r},{c})");
            }
        }
        assert!((run(&x).1 - log_abs_det(&j)).abs() < 1e-6);
    }
}

#[test]
fn pattern_norm_log_det_matches_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let mut pn = PatternNorm::new(&mut store, "x.norm", 5);
    pn.mark_initialized();
    perturb_flow(&mut store, 0.1, &mut rng);
    let x: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
    let run = |v: &[f64]| {
        let mut tape = Tape::with_params(&store);
        let xv = tape.constant(row(v)).unwrap();
        let (y, ld) = pn.forward(&mut tape, xv).unwrap();
        (tape.value(y).data().to_vec(), tape.value(ld).data()[0])
    };
    let j = jacobian(&x, |v| run(v).0);
    assert!((run(&x).1 - log_abs_det(&j)).abs() < 1e-6);
}

#[test]
fn identity_stack_passes_through() {
    let (flow, store) = identity_flow(4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = normal(5, 4, &mut rng);
    let mut tape = Tape::with_params(&store);
    let xv = tape.constant(x.clone()).unwrap();
    let cv = tape.constant(normal(5, 3, &mut rng)).unwrap();
    let out = flow.forward(&mut tape, xv, cv).unwrap();
    assert_eq!(tape.value(out.z), &x);
    assert!(tape.value(out.logdet).data().iter().all(|&v| v == 0.0));
    let back = flow.reverse(&mut tape, xv, cv).unwrap();
    assert_eq!(tape.value(back), &x);
}

#[test]
fn total_log_det_is_the_sum_of_step_oracles() {
    let config = FlowConfig {
        channels: 4,
        steps: 3,
        coupling_hidden: 8,
        factor_out: false,
        ..FlowConfig::default()
    };
    let (flow, store) = flow(&config, 2, 11, 0.4);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
    let cond = normal(1, 2, &mut rng);

    let mut oracle = 0.0;
    let mut h = x.clone();
    for (j, step) in flow.steps().iter().enumerate() {
        let apply = |v: &[f64]| {
            let mut tape = Tape::with_params(&store);
            let mut y = tape.constant(row(v)).unwrap();
            if let Some(n) = &step.norm {
                y = n.forward(&mut tape, y).unwrap().0;
            }
            y = step.linear.forward(&mut tape, y, j).unwrap().0;
            let c = tape.constant(cond.clone()).unwrap();
            y = step.coupling.forward(&mut tape, y, c).unwrap().0;
            tape.value(y).data().to_vec()
        };
        oracle += log_abs_det(&jacobian(&h, apply));
        h = apply(&h);
    }
    let mut tape = Tape::with_params(&store);
    let xv = tape.constant(row(&x)).unwrap();
    let cv = tape.constant(cond).unwrap();
    let out = flow.forward(&mut tape, xv, cv).unwrap();
    assert!((tape.value(out.logdet).data()[0] - oracle).abs() < 1e-6);
    let per_step: f64 = out.step_logdets.iter().map(|&v| tape.value(v).data()[0]).sum();
    assert!((tape.value(out.logdet).data()[0] - per_step).abs() < 1e-12);
    assert_eq!(tape.value(out.z).data(), h.as_slice());
}

#[test]
fn reverse_composes_step_inverses_backwards() {
    let config = FlowConfig {
        channels: 6,
        steps: 3,
        coupling_hidden: 8,
        factor_out: false,
        ..FlowConfig::default()
    };
    let (flow, store) = flow(&config, 2, 21, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let z = normal(4, 6, &mut rng);
    let cond = normal(4, 2, &mut rng);
    let mut tape = Tape::with_params(&store);
    let zv = tape.constant(z).unwrap();
    let cv = tape.constant(cond).unwrap();
    let stacked = flow.reverse(&mut tape, zv, cv).unwrap();
    let mut h = zv;
    for (j, step) in flow.steps().iter().enumerate().rev() {
        h = step.coupling.reverse(&mut tape, h, cv).unwrap();
        h = step.linear.reverse(&mut tape, h, j).unwrap();
        if let Some(n) = &step.norm {
            h = n.reverse(&mut tape, h).unwrap();
        }
    }
    assert_eq!(tape.value(stacked), tape.value(h));
}

#[test]
fn nll_of_origin_under_identity_flow_is_log_two_pi() {
    let (flow, store) = identity_flow(2, 2);
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(Tensor::zeros(&[1, 2])).unwrap();
    let c = tape.constant(Tensor::zeros(&[1, 3])).unwrap();
    let (loss, _) = flow.nll(&mut tape, x, c, &BaseDensity::new(2, 1.0)).unwrap();
    let expected = (2.0 * std::f64::consts::PI).ln();
    assert!((tape.value(loss).data()[0] - expected).abs() < 1e-10);
}

#[test]
fn nll_of_standard_normal_data_matches_entropy() {
    let c = 4;
    let (flow, store) = identity_flow(c, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(normal(n, c, &mut rng)).unwrap();
    let cv = tape.constant(Tensor::zeros(&[n, 3])).unwrap();
    let (loss, _) = flow.nll(&mut tape, x, cv, &BaseDensity::new(c, 1.0)).unwrap();
    let expected = c as f64 / 2.0 * (1.0 + (2.0 * std::f64::consts::PI).ln());
    let got = tape.value(loss).data()[0];
    assert!((got - expected).abs() / expected < 0.02, "{got} vs {expected}");
}

#[test]
fn doubling_pattern_scales_shifts_nll_analytically() {
    let c = 4;
    let (flow, mut store) = identity_flow(c, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = normal(16, c, &mut rng);
    let base = BaseDensity::new(c, 1.0);
    let nll = |store: &ParamStore| {
        let mut tape = Tape::with_params(store);
        let xv = tape.constant(x.clone()).unwrap();
        let cv = tape.constant(Tensor::zeros(&[16, 3])).unwrap();
        let (l, _) = flow.nll(&mut tape, xv, cv, &base).unwrap();
        tape.value(l).data()[0]
    };
    let before = nll(&store);
    let scale = flow.steps()[0].norm.as_ref().unwrap().scale();
    store.set(scale, Tensor::full(&[c], 2.0)).unwrap();
    let after = nll(&store);
    let sq: f64 = x.data().iter().map(|v| v * v).sum::<f64>() / 16.0;
    let expected = -(c as f64) * 2f64.ln() + 0.5 * (4.0 * sq - sq);
    assert!((after - before - expected).abs() < 1e-10);
}

#[test]
fn zero_temperature_samples_coincide() {
    let config = FlowConfig {
        channels: 4,
        steps: 2,
        coupling_hidden: 8,
        factor_out: false,
        ..FlowConfig::default()
    };
    let (flow, store) = flow(&config, 3, 31, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let cond = normal(2, 3, &mut rng);
    let mut tape = Tape::with_params(&store);
    let cv = tape.constant(cond).unwrap();
    let s = flow.sample(&mut tape, cv, 5, 0.0, &mut rng).unwrap();
    let s = tape.value(s);
    for b in 0..2 {
        for k in 1..5 {
            assert_eq!(s.row(b * 5 + k), s.row(b * 5));
        }
    }
}

#[test]
fn identity_stack_samples_are_the_gaussian_draws() {
    let (flow, store) = identity_flow(4, 2);
    let mut tape = Tape::with_params(&store);
    let cv = tape.constant(Tensor::zeros(&[3, 3])).unwrap();
    let s = flow.sample(&mut tape, cv, 2, 0.7, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let draws: Vec<f64> = (0..24).map(|_| 0.7 * rng.sample::<f64, _>(StandardNormal)).collect();
    assert_eq!(tape.value(s).data(), draws.as_slice());
}

#[test]
fn fixed_seed_samples_repeat() {
    let config = FlowConfig {
        channels: 8,
        steps: 4,
        coupling_hidden: 8,
        factor_every: 2,
        factor_channels: 2,
        ..FlowConfig::default()
    };
    let (flow, store) = flow(&config, 3, 41, 0.3);
    let draw = || {
        let mut tape = Tape::with_params(&store);
        let cv = tape.constant(Tensor::full(&[2, 3], 0.5)).unwrap();
        let s = flow.sample(&mut tape, cv, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        tape.value(s).clone()
    };
    assert_eq!(draw(), draw());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn round_trip_recovers_inputs(
        seed in 0u64..10_000,
        half in 1usize..5,
        steps in 1usize..5,
        factor in any::<bool>(),
        scale in 0.01f64..0.8,
    ) {
        let channels = 4 * half;
        let config = FlowConfig {
            channels,
            steps,
            coupling_hidden: 8,
            factor_out: factor,
            factor_every: 1,
            factor_channels: 2,
            ..FlowConfig::default()
        };
        prop_assume!(config.widths().is_ok());
        let (flow, store) = flow(&config, 3, seed, scale);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let err = stglow::pipeline::check::flow_round_trip_error(&flow, &store, 16, &mut rng).unwrap();
        prop_assert!(err < 1e-9, "round-trip error {err}");
    }

    #[test]
    fn log_det_matches_numerical_jacobian(seed in 0u64..10_000, factor in any::<bool>()) {
        let config = FlowConfig {
            channels: 6,
            steps: 3,
            coupling_hidden: 8,
            factor_out: factor,
            factor_every: 1,
            factor_channels: 2,
            ..FlowConfig::default()
        };
        let (flow, store) = flow(&config, 2, seed, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let x: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
        let cond = normal(1, 2, &mut rng);
        let run = |v: &[f64]| {
            let mut tape = Tape::with_params(&store);
            let xv = tape.constant(row(v)).unwrap();
            let cv = tape.constant(cond.clone()).unwrap();
            let out = flow.forward(&mut tape, xv, cv).unwrap();
            (tape.value(out.z).data().to_vec(), tape.value(out.logdet).data()[0])
        };
        let j = jacobian(&x, |v| run(v).0);
        prop_assert!((run(&x).1 - log_abs_det(&j)).abs() < 1e-6);
    }
}
