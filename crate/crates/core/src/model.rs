//! The assembled model: encoder, flow and decoder over one parameter store.

use numcore::{ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Point, SceneWindow};
use crate::decoder::{total_loss, trajectory_losses, DecodedBatch, Decoder, DecoderConfig, LossWeights};
use crate::error::{Error, Result};
use crate::flow::{BaseDensity, FlowConfig, FlowStack};
use crate::graphormer::{DualGraphormer, EncodedScene, EncoderConfig, SceneInput};
use crate::nn::Linear;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub t_o: usize,
    pub t_p: usize,
    pub encoder: EncoderConfig,
    pub flow: FlowConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            t_o: 8,
            t_p: 12,
            encoder: EncoderConfig::default(),
            flow: FlowConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_o == 0 || self.t_p == 0 {
            return Err(Error::Config("t_o and t_p must be positive".into()));
        }
        let e = &self.encoder;
        if e.width == 0 || e.heads == 0 || e.width % e.heads != 0 {
            return Err(Error::Config(format!(
                "encoder width {} must be a positive multiple of the head count {}",
                e.width, e.heads
            )));
        }
        if e.max_steps < self.t_o + self.t_p {
            return Err(Error::Config(format!(
                "positional table of {} steps is shorter than t_o + t_p = {}",
                e.max_steps,
                self.t_o + self.t_p
            )));
        }
        if self.decoder.hidden == 0 {
            return Err(Error::Config("decoder hidden width must be positive".into()));
        }
        self.flow.widths()?;
        Ok(())
    }
}

/// Loss terms of one training step.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Var,
    pub nll: Var,
    pub traj: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct StGlow {
    pub store: ParamStore,
    encoder: DualGraphormer,
    /// Maps encoder-width behaviors to flow width when the two differ.
    behavior_proj: Option<Linear>,
    flow: FlowStack,
    decoder: Decoder,
    config: ModelConfig,
}

impl StGlow {
    /// Builds all modules, registering parameters in a fixed order.
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let d = config.encoder.width;
        let c = config.flow.channels;
        let encoder = DualGraphormer::new(&mut store, "encoder", &config.encoder, rng);
        let behavior_proj = (c != d).then(|| Linear::new(&mut store, "behavior_proj", d, c, rng));
        let flow = FlowStack::new(&mut store, "flow", &config.flow, d, rng)?;
        let decoder = Decoder::new(&mut store, "decoder", c, config.t_p, &config.decoder, rng)?;
        Ok(Self {
            store,
            encoder,
            behavior_proj,
            flow,
            decoder,
            config: *config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &DualGraphormer {
        &self.encoder
    }

    pub fn flow(&self) -> &FlowStack {
        &self.flow
    }

    pub fn flow_mut(&mut self) -> &mut FlowStack {
        &mut self.flow
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn base_density(&self) -> BaseDensity {
        BaseDensity::new(self.config.flow.channels, 1.0)
    }

    fn check_window(&self, w: &SceneWindow) -> Result<()> {
        if w.t_o() != self.config.t_o || w.t_p() != self.config.t_p {
            return Err(Error::Config(format!(
                "window has t_o={}, t_p={} but the model expects {} and {}",
                w.t_o(),
                w.t_p(),
                self.config.t_o,
                self.config.t_p
            )));
        }
        Ok(())
    }

    /// Encodes scenes; with `training` the behavior vector is projected to
    /// flow width.
    pub fn encode(&self, tape: &mut Tape, scenes: &[&SceneWindow], training: bool) -> Result<(EncodedScene, Option<Var>)> {
        for w in scenes {
            self.check_window(w)?;
        }
        let inputs: Vec<SceneInput> = scenes.iter().map(|w| SceneInput::from_window(w, training)).collect();
        let enc = self.encoder.encode(tape, &inputs, training)?;
        let mb = match (enc.mb, &self.behavior_proj) {
            (Some(mb), Some(p)) => Some(p.forward(tape, mb)?),
            (mb, None) => mb,
            (None, Some(_)) => None,
        };
        Ok((enc, mb))
    }

    /// Data-dependent flow initialization from the behaviors of `scenes`.
    pub fn initialize_flow(&mut self, scenes: &[&SceneWindow]) -> Result<()> {
        if self.flow.is_initialized() {
            return Ok(());
        }
        let (mb, st) = {
            let mut tape = Tape::with_params(&self.store);
            let (enc, mb) = self.encode(&mut tape, scenes, true)?;
            let mb = mb.ok_or_else(|| Error::Contract("training encode produced no behavior".into()))?;
            (tape.value(mb).clone(), tape.value(enc.st).clone())
        };
        self.flow.initialize(&mut self.store, &mb, &st)
    }

    /// `L_p + Σ L_traj` on a batch, sampling `k` behaviors per target at unit
    /// temperature.
    pub fn training_loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        scenes: &[&SceneWindow],
        k: usize,
        weights: &LossWeights,
        rng: &mut R,
    ) -> Result<LossParts> {
        let (enc, mb) = self.encode(tape, scenes, true)?;
        let mb = mb.ok_or_else(|| Error::Contract("training encode produced no behavior".into()))?;
        let (nll, _) = self.flow.nll(tape, mb, enc.st, &self.base_density())?;
        let sampled = self.flow.sample(tape, enc.st, k, 1.0, rng)?;
        let decoded = self.decoder.decode(tape, sampled)?;
        let gts: Vec<&[Point]> = scenes.iter().map(|w| w.target_future()).collect();
        let traj = trajectory_losses(tape, &decoded, &gts, k, weights)?;
        let total = total_loss(tape, nll, &traj)?;
        Ok(LossParts { total, nll, traj })
    }

    /// Samples and decodes `k` futures per scene at temperature `sigma`.
    pub fn decode_samples<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        scenes: &[&SceneWindow],
        k: usize,
        sigma: f64,
        rng: &mut R,
    ) -> Result<DecodedBatch> {
        let (enc, _) = self.encode(tape, scenes, false)?;
        let sampled = self.flow.sample(tape, enc.st, k, sigma, rng)?;
        self.decoder.decode(tape, sampled)
    }

    /// `k` predicted target futures for one scene, in its normalized frame.
    pub fn predict<R: Rng + ?Sized>(&self, scene: &SceneWindow, k: usize, sigma: f64, rng: &mut R) -> Result<Vec<Vec<Point>>> {
        let mut tape = Tape::with_params(&self.store);
        let decoded = self.decode_samples(&mut tape, &[scene], k, sigma, rng)?;
        Ok(decoded.predictions(&tape))
    }

    /// Values of every parameter, flattened in registration order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.store.iter().flat_map(|(_, _, t)| t.data().iter().copied()).collect()
    }

    /// Replaces parameters from a flat vector laid out like [`Self::flat_params`].
    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.store.num_scalars() {
            return Err(Error::Contract(format!(
                "{} values for {} parameters",
                flat.len(),
                self.store.num_scalars()
            )));
        }
        let ids: Vec<_> = self.store.ids().collect();
        let mut offset = 0;
        for id in ids {
            let shape = self.store.get(id).shape().to_vec();
            let n = self.store.get(id).len();
            self.store.set(id, Tensor::new(shape, flat[offset..offset + n].to_vec())?)?;
            offset += n;
        }
        Ok(())
    }
}
