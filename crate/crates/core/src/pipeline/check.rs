//! Self-check suite: flow invertibility, log-det against a numerical
//! Jacobian, end-to-end gradients against finite differences, attention
//! masks and checkpoint round trips. Each check doubles as a library
//! function so tests can call it with their own tolerances.

use numcore::gradcheck::{close, numerical_jacobian};
use numcore::{linalg, ParamStore, Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::config::Config;
use super::stream_rng;
use crate::data::{synth_scenes, Point, ScenarioKind, SceneWindow, SynthSpec};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowStack};
use crate::graphormer::{EncoderConfig, SpatialGraphormer, SpatialInput, TemporalGraphormer};
use crate::model::{ModelConfig, StGlow};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckItem {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CheckReport {
    pub items: Vec<CheckItem>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(|c| c.passed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("check report serializes")
    }

    fn record(&mut self, name: &str, outcome: Result<(bool, String)>) {
        let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        self.items.push(CheckItem {
            name: name.into(),
            passed,
            detail,
        });
    }
}

/// Gives every coupling output layer and pattern normalization random
/// values, so that no flow step is the identity.
pub fn perturb_flow<R: Rng + ?Sized>(store: &mut ParamStore, scale: f64, rng: &mut R) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let t = store.get_mut(id);
        if name.contains(".coupling.out.") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
        } else if name.ends_with(".norm.scale") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3f64..0.3).exp());
        } else if name.ends_with(".norm.bias") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
}

fn normal_tensor<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let dist = rand_distr::StandardNormal;
    Tensor::from_fn(&[rows, cols], |_| rng.sample::<f64, _>(dist))
}

/// Largest `|reverse(forward(x)) - x|` over `samples` random inputs.
pub fn flow_round_trip_error<R: Rng + ?Sized>(
    flow: &FlowStack,
    store: &ParamStore,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    let x = normal_tensor(samples, flow.channels(), rng);
    let cond = normal_tensor(samples, flow.cond_dim(), rng);
    let mut tape = Tape::with_params(store);
    let xv = tape.constant(x.clone())?;
    let cv = tape.constant(cond)?;
    let out = flow.forward(&mut tape, xv, cv)?;
    let back = flow.reverse(&mut tape, out.z, cv)?;
    Ok(tape.value(back).max_abs_diff(&x))
}

/// Round-trip error of the flow of a freshly built model for `draws`
/// independent parameter draws.
pub fn invertibility(config: &FlowConfig, cond_dim: usize, draws: usize, samples: usize, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for d in 0..draws {
        let mut rng = stream_rng(seed, d as u64);
        let mut store = ParamStore::new();
        let mut flow = FlowStack::new(&mut store, "flow", config, cond_dim, &mut rng)?;
        perturb_flow(&mut store, 0.1, &mut rng);
        flow.mark_initialized();
        worst = worst.max(flow_round_trip_error(&flow, &store, samples, &mut rng)?);
    }
    Ok(worst)
}

/// `|analytic log-det - log|det J||` for one random input, where `J` is the
/// central-difference Jacobian of the forward map.
pub fn logdet_oracle_error(flow: &FlowStack, store: &ParamStore, rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = flow.channels();
    let x = normal_tensor(1, c, rng);
    let cond = normal_tensor(1, flow.cond_dim(), rng);
    let analytic = {
        let mut tape = Tape::with_params(store);
        let xv = tape.constant(x.clone())?;
        let cv = tape.constant(cond.clone())?;
        let out = flow.forward(&mut tape, xv, cv)?;
        tape.value(out.logdet).data()[0]
    };
    let mut failure = None;
    let jac = numerical_jacobian(x.data(), 1e-6, |probe| {
        let run = || -> Result<Vec<f64>> {
            let mut tape = Tape::with_params(store);
            let xv = tape.constant(Tensor::new(vec![1, c], probe.to_vec())?)?;
            let cv = tape.constant(cond.clone())?;
            let out = flow.forward(&mut tape, xv, cv)?;
            Ok(tape.value(out.z).data().to_vec())
        };
        run().unwrap_or_else(|e| {
            failure = Some(e);
            vec![0.0; c]
        })
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let flat: Vec<f64> = jac.into_iter().flatten().collect();
    let numeric = linalg::log_abs_det(&Tensor::new(vec![c, c], flat)?)?;
    Ok((analytic - numeric).abs())
}

/// Worst log-det oracle error over `draws` random C=4, two-step flows.
pub fn logdet_oracle(draws: usize, seed: u64) -> Result<f64> {
    let config = FlowConfig {
        channels: 4,
        steps: 2,
        coupling_hidden: 8,
        pattern_norm: true,
        factor_out: false,
        ..FlowConfig::default()
    };
    let mut worst = 0.0f64;
    for d in 0..draws {
        let mut rng = stream_rng(seed, d as u64);
        let mut store = ParamStore::new();
        let mut flow = FlowStack::new(&mut store, "flow", &config, 3, &mut rng)?;
        perturb_flow(&mut store, 0.3, &mut rng);
        flow.mark_initialized();
        worst = worst.max(logdet_oracle_error(&flow, &store, &mut rng)?);
    }
    Ok(worst)
}

/// Tiny end-to-end model: C=8, D=16, t_p=3.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        t_o: 4,
        t_p: 3,
        encoder: EncoderConfig {
            width: 16,
            heads: 2,
            max_steps: 8,
            ..EncoderConfig::default()
        },
        flow: FlowConfig {
            channels: 8,
            steps: 2,
            coupling_hidden: 8,
            factor_out: false,
            ..FlowConfig::default()
        },
        decoder: crate::decoder::DecoderConfig {
            hidden: 8,
            ..Default::default()
        },
    }
}

/// Two small synthetic scenes (one single walker, one crossing pair)
/// matching `tiny_model_config`.
pub fn tiny_scenes(seed: u64) -> Result<Vec<SceneWindow>> {
    synth_scenes(&SynthSpec {
        kinds: vec![(ScenarioKind::Turn, 1), (ScenarioKind::CrossingPair, 1)],
        seed,
        t_o: 4,
        t_p: 3,
        ..SynthSpec::default()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub failures: usize,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub worst: f64,
    pub worst_param: String,
}

/// Compares the analytic gradient of the training loss with central finite
/// differences (`h = 1e-5`) for every scalar parameter, or every `stride`-th
/// one.
pub fn gradient_check(
    model: &StGlow,
    scenes: &[SceneWindow],
    k: usize,
    weights: &crate::decoder::LossWeights,
    stride: usize,
    seed: u64,
) -> Result<GradCheck> {
    const H: f64 = 1e-5;
    const REL: f64 = 1e-3;
    const FLOOR: f64 = 1e-8;
    let refs: Vec<&SceneWindow> = scenes.iter().collect();
    let loss = |m: &StGlow| -> Result<f64> {
        let mut tape = Tape::with_params(&m.store);
        let parts = m.training_loss(&mut tape, &refs, k, weights, &mut stream_rng(seed, 0))?;
        Ok(tape.value(parts.total).data()[0])
    };
    let grads = {
        let mut tape = Tape::with_params(&model.store);
        let parts = model.training_loss(&mut tape, &refs, k, weights, &mut stream_rng(seed, 0))?;
        tape.backward(parts.total)?;
        tape.param_grads()
    };
    let mut probe = model.clone();
    let mut report = GradCheck {
        checked: 0,
        failures: 0,
        worst: 0.0,
        worst_param: String::new(),
    };
    let mut counter = 0usize;
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let analytic = grads.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; model.store.get(id).len()]);
        for (i, &a) in analytic.iter().enumerate() {
            counter += 1;
            if (counter - 1) % stride.max(1) != 0 {
                continue;
            }
            let orig = probe.store.get(id).data()[i];
            probe.store.get_mut(id).data_mut()[i] = orig + H;
            let up = loss(&probe)?;
            probe.store.get_mut(id).data_mut()[i] = orig - H;
            let down = loss(&probe)?;
            probe.store.get_mut(id).data_mut()[i] = orig;
            let n = (up - down) / (2.0 * H);
            report.checked += 1;
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(FLOOR / REL);
            if rel > report.worst {
                report.worst = rel;
                report.worst_param = format!("{}[{i}]", model.store.name(id));
            }
            if !close(a, n, REL, FLOOR) {
                report.failures += 1;
            }
        }
    }
    Ok(report)
}

/// Builds and prepares the tiny model used by the gradient check: flow
/// initialized on the scenes, then perturbed so every path carries
/// gradient.
pub fn tiny_model(seed: u64) -> Result<(StGlow, Vec<SceneWindow>)> {
    let mut rng = stream_rng(seed, 0);
    let mut model = StGlow::new(&tiny_model_config(), &mut rng)?;
    let scenes = tiny_scenes(seed)?;
    let refs: Vec<&SceneWindow> = scenes.iter().collect();
    model.initialize_flow(&refs)?;
    perturb_flow(&mut model.store, 0.1, &mut rng);
    Ok((model, scenes))
}

fn random_walk<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<Point> {
    let mut p = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(p);
        p = [p[0] + rng.random_range(-0.5..0.5), p[1] + rng.random_range(-0.5..0.5)];
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskCheck {
    /// Largest temporal attention weight on a future step.
    pub temporal: f64,
    /// Largest spatial attention weight on a masked neighbor.
    pub spatial: f64,
    /// Masked spatial pairs seen; zero would make the check vacuous.
    pub masked_pairs: usize,
}

/// Runs random scenes through fresh temporal and spatial encoders and
/// reports the largest attention weight that the masks should have zeroed.
pub fn mask_check(scenes: usize, seed: u64) -> Result<MaskCheck> {
    let config = EncoderConfig {
        width: 32,
        ..EncoderConfig::default()
    };
    let mut rng = stream_rng(seed, 0);
    let mut store = ParamStore::new();
    let tg = TemporalGraphormer::new(&mut store, "tg", &config, &mut rng);
    let sg = SpatialGraphormer::new(&mut store, "sg", &config, &mut rng);
    let mut report = MaskCheck {
        temporal: 0.0,
        spatial: 0.0,
        masked_pairs: 0,
    };
    for _ in 0..scenes {
        let n = rng.random_range(2..7);
        let t = rng.random_range(2..=config.max_steps);
        let trajs: Vec<Vec<Point>> = (0..n).map(|_| random_walk(t, &mut rng)).collect();
        let refs: Vec<&[Point]> = trajs.iter().map(Vec::as_slice).collect();
        let mut tape = Tape::with_params(&store);
        let out = tg.forward(&mut tape, &refs)?;
        for heads in &out.weights {
            for &w in heads {
                let w = tape.value(w);
                for i in 0..t {
                    for j in i + 1..t {
                        report.temporal = report.temporal.max(w.get2(i, j).abs());
                    }
                }
            }
        }
        let input = SpatialInput {
            prev: trajs.iter().map(|tr| tr[t - 2]).collect(),
            now: trajs.iter().map(|tr| tr[t - 1]).collect(),
            target: rng.random_range(0..n),
        };
        let th = tape.constant(normal_tensor(n, config.width, &mut rng))?;
        let out = sg.forward(&mut tape, &[input], th)?;
        let keep = out.graphs[0].keep();
        for &w in &out.weights[0] {
            let w = tape.value(w);
            for i in 0..n {
                for j in 0..n {
                    if !keep[i * n + j] {
                        report.masked_pairs += 1;
                        report.spatial = report.spatial.max(w.get2(i, j).abs());
                    }
                }
            }
        }
    }
    Ok(report)
}

/// Serializes, parses and re-serializes; the model parameters must come
/// back bit for bit.
pub fn checkpoint_round_trip(bytes: &[u8]) -> Result<(bool, String)> {
    let ck = Checkpoint::from_bytes(bytes)?;
    let model = ck.model()?;
    let again = Checkpoint::from_bytes(&ck.to_bytes()?)?;
    let reloaded = again.model()?;
    let same = model
        .flat_params()
        .iter()
        .zip(reloaded.flat_params())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    Ok((same, format!("{} parameters at epoch {}", model.store.num_scalars(), ck.epoch)))
}

/// Runs the whole suite. With `checkpoint` bytes the invertibility and
/// round-trip checks use that model; otherwise a fresh toy model.
pub fn run_checks(checkpoint: Option<&[u8]>, seed: u64) -> CheckReport {
    let mut report = CheckReport::default();
    let fresh = || -> Result<Vec<u8>> {
        let config = Config::toy();
        let model = super::init_model(&config)?;
        let adam = numcore::Adam::new(&model.store, config.train.lr, config.train.betas, config.train.weight_decay);
        Checkpoint::capture(&config, &model, &adam, &stream_rng(seed, 1), 0).to_bytes()
    };
    let bytes = match checkpoint {
        Some(b) => Ok(b.to_vec()),
        None => fresh(),
    };

    let invertible = |b: &[u8]| -> Result<(bool, String)> {
        let ck = Checkpoint::from_bytes(b)?;
        let mut model = ck.model()?;
        model.flow_mut().mark_initialized();
        let mut rng = stream_rng(seed, 2);
        let err = flow_round_trip_error(model.flow(), &model.store, 100, &mut rng)?;
        let fresh = invertibility(&ck.config.model.flow, model.flow().cond_dim(), 3, 100, seed)?;
        let worst = err.max(fresh);
        Ok((worst < 1e-9, format!("max |reverse(forward(x)) - x| = {worst:.3e}")))
    };
    report.record(
        "flow_invertibility",
        match &bytes {
            Ok(b) => invertible(b),
            Err(e) => Err(Error::Checkpoint(e.to_string())),
        },
    );
    report.record(
        "logdet_jacobian_oracle",
        logdet_oracle(20, seed).map(|e| (e < 1e-4, format!("max log-det error = {e:.3e} over 20 draws"))),
    );
    report.record(
        "gradient_finite_differences",
        tiny_model(seed).and_then(|(model, scenes)| {
            let g = gradient_check(&model, &scenes, 2, &Default::default(), 7, seed)?;
            Ok((
                g.failures == 0,
                format!(
                    "{} of {} sampled parameters disagree; worst relative error {:.3e} at {}",
                    g.failures, g.checked, g.worst, g.worst_param
                ),
            ))
        }),
    );
    report.record(
        "attention_masks",
        mask_check(50, seed).map(|m| {
            (
                m.temporal == 0.0 && m.spatial == 0.0 && m.masked_pairs > 0,
                format!(
                    "max future-step weight {:.3e}, max masked-neighbor weight {:.3e} over {} masked pairs",
                    m.temporal, m.spatial, m.masked_pairs
                ),
            )
        }),
    );
    report.record(
        "checkpoint_round_trip",
        bytes.and_then(|b| checkpoint_round_trip(&b)),
    );
    report
}
