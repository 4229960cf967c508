//! Scene encoding into motion-behavior (MB) and social-interaction (ST)
//! vectors.

use numcore::{ParamStore, Tape, Var};
use rand::Rng;

use super::spatial::{SpatialGraphormer, SpatialInput};
use super::temporal::TemporalEncoder;
use super::EncoderConfig;
use crate::data::{Point, SceneWindow};
use crate::error::{Error, Result};

/// Observed positions of every pedestrian in a scene, the target index, and
/// (when training) the target's future.
#[derive(Debug, Clone, Copy)]
pub struct SceneInput<'a> {
    pub obs: &'a [Vec<Point>],
    pub target: usize,
    pub future: Option<&'a [Point]>,
}

impl<'a> SceneInput<'a> {
    pub fn from_window(w: &'a SceneWindow, with_future: bool) -> Self {
        Self {
            obs: &w.obs,
            target: w.target,
            future: with_future.then(|| w.target_future()),
        }
    }
}

/// Encoder outputs for a batch of scenes (one row per scene unless noted).
#[derive(Debug, Clone)]
pub struct EncodedScene {
    /// Final-step temporal embedding of every pedestrian, `(ΣN)×D`.
    pub th: Var,
    /// Spatial embedding of each target, `B×D`; absent when the spatial
    /// graphormer is disabled.
    pub sh: Option<Var>,
    /// Target's own final-step temporal embedding, `B×D`.
    pub th_target: Var,
    /// `th_target + sh`, `B×D`.
    pub st: Var,
    /// Final-step embedding of the target's full trajectory, `B×D`; training
    /// only.
    pub mb: Option<Var>,
}

/// Three temporal encoders (neighbors, target history, full target
/// trajectory) with separate weights, plus the spatial graphormer.
#[derive(Debug, Clone)]
pub struct DualGraphormer {
    tg_neighbors: TemporalEncoder,
    tg_target: TemporalEncoder,
    tg_behavior: TemporalEncoder,
    sg: Option<SpatialGraphormer>,
    config: EncoderConfig,
}

impl DualGraphormer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: &EncoderConfig, rng: &mut R) -> Self {
        Self {
            tg_neighbors: TemporalEncoder::new(store, &format!("{name}.tg_h"), config, rng),
            tg_target: TemporalEncoder::new(store, &format!("{name}.tg_y"), config, rng),
            tg_behavior: TemporalEncoder::new(store, &format!("{name}.tg_mb"), config, rng),
            sg: config
                .spatial
                .then(|| SpatialGraphormer::new(store, &format!("{name}.sg"), config, rng)),
            config: *config,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn spatial(&self) -> Option<&SpatialGraphormer> {
        self.sg.as_ref()
    }

    pub fn temporal_neighbors(&self) -> &TemporalEncoder {
        &self.tg_neighbors
    }

    pub fn temporal_behavior(&self) -> &TemporalEncoder {
        &self.tg_behavior
    }

    /// Encodes a batch of scenes. With `training` set every input must carry
    /// the target's future, from which MB is computed.
    pub fn encode(&self, tape: &mut Tape, scenes: &[SceneInput], training: bool) -> Result<EncodedScene> {
        if scenes.is_empty() {
            return Err(Error::Contract("empty scene batch".into()));
        }
        for s in scenes {
            if s.obs.is_empty() || s.target >= s.obs.len() {
                return Err(Error::Contract("scene without a valid target".into()));
            }
            if training && s.future.is_none() {
                return Err(Error::Contract("training requires the target's full trajectory".into()));
            }
        }
        let all: Vec<&[Point]> = scenes.iter().flat_map(|s| s.obs.iter().map(Vec::as_slice)).collect();
        let th = self.tg_neighbors.forward_last(tape, &all)?;

        let targets: Vec<&[Point]> = scenes.iter().map(|s| s.obs[s.target].as_slice()).collect();
        let th_target = self.tg_target.forward_last(tape, &targets)?;

        let sh = match &self.sg {
            Some(sg) => {
                let inputs: Vec<SpatialInput> = scenes.iter().map(snapshot).collect();
                let out = sg.forward(tape, &inputs, th)?;
                let index: Vec<usize> = scenes.iter().zip(&out.offsets).map(|(s, &o)| o + s.target).collect();
                Some(tape.gather_rows(out.out, &index)?)
            }
            None => None,
        };
        let st = match sh {
            Some(sh) => tape.add(th_target, sh)?,
            None => th_target,
        };

        let mb = match scenes.iter().map(|s| s.future).collect::<Option<Vec<_>>>() {
            Some(futures) => {
                let full: Vec<Vec<Point>> = scenes
                    .iter()
                    .zip(futures)
                    .map(|(s, f)| s.obs[s.target].iter().chain(f).copied().collect())
                    .collect();
                let refs: Vec<&[Point]> = full.iter().map(Vec::as_slice).collect();
                Some(self.tg_behavior.forward_last(tape, &refs)?)
            }
            None => None,
        };
        Ok(EncodedScene {
            th,
            sh,
            th_target,
            st,
            mb,
        })
    }
}

/// Last two observed snapshots; a single observed step gives zero walking
/// directions.
fn snapshot(s: &SceneInput) -> SpatialInput {
    let t = s.obs[0].len();
    let now: Vec<Point> = s.obs.iter().map(|tr| tr[t - 1]).collect();
    let prev = if t >= 2 {
        s.obs.iter().map(|tr| tr[t - 2]).collect()
    } else {
        now.clone()
    };
    SpatialInput {
        prev,
        now,
        target: s.target,
    }
}
