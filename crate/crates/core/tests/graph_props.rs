use numcore::{ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stglow::data::{synth_scenes, Point, ScenarioKind, SynthSpec};
use stglow::graphormer::{
    build_spatial_adjacency, build_temporal_adjacency, steering_cosine, DualGraphormer, EncoderConfig, SceneInput,
    SpatialGraphormer, SpatialInput, TemporalEncoder, TemporalGraphormer,
};

fn config() -> EncoderConfig {
    EncoderConfig {
        width: 16,
        heads: 2,
        ..EncoderConfig::default()
    }
}

fn walk(len: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let mut p = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
    (0..len)
        .map(|_| {
            let out = p;
            p = [p[0] + rng.random_range(-0.4..0.4), p[1] + rng.random_range(-0.4..0.4)];
            out
        })
        .collect()
}

#[test]
fn eight_step_graph_has_thirty_six_edges() {
    let g = build_temporal_adjacency(8).unwrap();
    let ones = (0..8).flat_map(|i| (0..8).map(move |j| (i, j))).filter(|&(i, j)| g.get(i, j) == 1.0).count();
    assert_eq!(ones, 36);
    for j in 0..8 {
        let column = (0..8).filter(|&i| g.get(i, j) == 1.0).count();
        assert_eq!(g.degree(j), column);
    }
    assert_eq!(g.degree(2), 6);
    assert_eq!(g.degree(7), 1);
}

#[test]
fn single_step_attends_to_itself() {
    let mut store = ParamStore::new();
    let tg = TemporalGraphormer::new(&mut store, "tg", &config(), &mut ChaCha8Rng::seed_from_u64(0));
    let mut tape = Tape::with_params(&store);
    let out = tg.forward(&mut tape, &[&[[0.3, -0.2]]]).unwrap();
    for &w in &out.weights[0] {
        assert_eq!(tape.value(w).data(), &[1.0]);
    }
}

#[test]
fn spatial_graph_follows_walking_direction() {
    let g = build_spatial_adjacency(&[[-1.0, 0.0], [2.0, 0.0], [-2.0, 0.0]], &[[0.0, 0.0], [2.0, 0.0], [-2.0, 0.0]]).unwrap();
    assert_eq!(g.get(0, 1), 1.0);
    assert_eq!(g.get(0, 2), f64::NEG_INFINITY);
    let still = build_spatial_adjacency(&[[0.0, 0.0], [3.0, -1.0]], &[[0.0, 0.0], [3.0, -1.0]]).unwrap();
    assert!(still.mask().iter().all(|&v| v == 1.0));
    assert_eq!(build_spatial_adjacency(&[[1.0, 1.0]], &[[2.0, 2.0]]).unwrap().mask(), &[1.0]);
}

#[test]
fn lone_pedestrian_only_sees_itself() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let sg = SpatialGraphormer::new(&mut store, "sg", &config(), &mut rng);
    let mut tape = Tape::with_params(&store);
    let th = tape.constant(Tensor::from_fn(&[1, 16], |i| i as f64 * 0.1)).unwrap();
    let input = SpatialInput {
        prev: vec![[0.0, 0.0]],
        now: vec![[0.5, 0.1]],
        target: 0,
    };
    let out = sg.forward(&mut tape, &[input], th).unwrap();
    assert_eq!(tape.value(out.weights[0][0]).data(), &[1.0]);
    assert!(tape.value(out.out).is_finite());
}

#[test]
fn encoded_scene_shapes_and_behavior_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let enc = DualGraphormer::new(&mut store, "enc", &config(), &mut rng);
    let scene = synth_scenes(&SynthSpec {
        kinds: vec![(ScenarioKind::GroupParallel, 1)],
        seed: 3,
        ..SynthSpec::default()
    })
    .unwrap()
    .remove(0)
    .retarget(1)
    .unwrap();
    let mut obs = scene.obs.clone();
    obs.push(walk(8, &mut rng));
    let future = scene.target_future();
    let input = SceneInput {
        obs: &obs,
        target: 1,
        future: Some(future),
    };
    let mut tape = Tape::with_params(&store);
    let out = enc.encode(&mut tape, &[input], true).unwrap();
    assert_eq!(tape.shape(out.th), &[4, 16]);
    assert_eq!(tape.shape(out.st), &[1, 16]);
    assert!(tape.value(out.st).is_finite());
    let mb = tape.value(out.mb.unwrap()).clone();

    let full: Vec<Point> = obs[1].iter().chain(future).copied().collect();
    let TemporalEncoder::Graphormer(tg) = enc.temporal_behavior() else {
        panic!("behavior encoder should be a graphormer");
    };
    let direct = tg.forward(&mut tape, &[&full]).unwrap();
    let last = tape.value(direct.out).row(direct.row(0, 19)).to_vec();
    assert_eq!(mb.data(), last.as_slice());
}

#[test]
fn masked_weights_vanish_on_random_scenes() {
    let m = stglow::pipeline::check::mask_check(50, 7).unwrap();
    assert_eq!(m.temporal, 0.0);
    assert_eq!(m.spatial, 0.0);
    assert!(m.masked_pairs > 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn temporal_outputs_ignore_the_future(seed in 0u64..10_000, len in 2usize..12, cut in 0usize..11) {
        prop_assume!(cut + 1 < len);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let tg = TemporalGraphormer::new(&mut store, "tg", &config(), &mut rng);
        let a = walk(len, &mut rng);
        let mut b = a.clone();
        for p in &mut b[cut + 1..] {
            p[0] += rng.random_range(-3.0..3.0);
            p[1] += rng.random_range(-3.0..3.0);
        }
        let mut tape = Tape::with_params(&store);
        let oa = tg.forward(&mut tape, &[&a]).unwrap();
        let ob = tg.forward(&mut tape, &[&b]).unwrap();
        for t in 0..=cut {
            prop_assert_eq!(tape.value(oa.out).row(t), tape.value(ob.out).row(t));
        }
    }

    #[test]
    fn spatial_encoder_is_permutation_equivariant(seed in 0u64..10_000, n in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let sg = SpatialGraphormer::new(&mut store, "sg", &config(), &mut rng);
        let prev: Vec<Point> = (0..n).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
        let now: Vec<Point> = prev.iter().map(|p| [p[0] + rng.random_range(-0.5..0.5), p[1] + rng.random_range(-0.5..0.5)]).collect();
        let th = Tensor::from_fn(&[n, 16], |_| rng.random_range(-1.0..1.0));
        let target = rng.random_range(0..n);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        perm.rotate_left(seed as usize % n);

        let mut tape = Tape::with_params(&store);
        let thv = tape.constant(th.clone()).unwrap();
        let base = sg.forward(&mut tape, &[SpatialInput { prev: prev.clone(), now: now.clone(), target }], thv).unwrap();
        let pth = Tensor::from_fn(&[n, 16], |i| th.get2(perm[i / 16], i % 16));
        let pthv = tape.constant(pth).unwrap();
        let permuted = SpatialInput {
            prev: perm.iter().map(|&i| prev[i]).collect(),
            now: perm.iter().map(|&i| now[i]).collect(),
            target: perm.iter().position(|&i| i == target).unwrap(),
        };
        let out = sg.forward(&mut tape, &[permuted], pthv).unwrap();
        let (a, b) = (tape.value(base.out), tape.value(out.out));
        for (i, &src) in perm.iter().enumerate() {
            for (x, y) in b.row(i).iter().zip(a.row(src)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn steering_cosine_is_bounded_and_symmetric(ax in -5.0f64..5.0, ay in -5.0f64..5.0, bx in -5.0f64..5.0, by in -5.0f64..5.0) {
        let c = steering_cosine([ax, ay], [bx, by]);
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert_eq!(c, steering_cosine([bx, by], [ax, ay]));
    }
}
