//! Spatial graphormer over the pedestrians of a scene at one time step.

use numcore::{ParamStore, Tape, Tensor, Var};
use rand::Rng;

use super::adjacency::{build_spatial_adjacency, steering_cosine, SpatialGraph};
use super::EncoderConfig;
use crate::data::Point;
use crate::error::{Error, Result};
use crate::nn::{EncoderBlock, Linear, Segment};

/// Two consecutive position snapshots of one scene and the pedestrian the
/// relative embeddings are taken against.
#[derive(Debug, Clone)]
pub struct SpatialInput {
    pub prev: Vec<Point>,
    pub now: Vec<Point>,
    pub target: usize,
}

/// Node `i` is `R_i + S_i + TH_i`: relative-position and steering
/// embeddings (both taken against the target) plus the temporal embedding.
/// There is no positional encoding, pedestrians being unordered.
#[derive(Debug, Clone)]
pub struct SpatialGraphormer {
    position: Linear,
    steering: Linear,
    block: EncoderBlock,
    config: EncoderConfig,
}

#[derive(Debug, Clone)]
pub struct SpatialOutput {
    /// `(ΣN)×D`, scenes stacked in input order.
    pub out: Var,
    pub offsets: Vec<usize>,
    pub weights: Vec<Vec<Var>>,
    pub graphs: Vec<SpatialGraph>,
}

impl SpatialGraphormer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: &EncoderConfig, rng: &mut R) -> Self {
        let d = config.width;
        Self {
            position: Linear::new(store, &format!("{name}.position"), 2, d, rng),
            steering: Linear::new(store, &format!("{name}.steering"), 1, d, rng),
            block: EncoderBlock::new(store, &format!("{name}.block"), d, config.heads, rng),
            config: *config,
        }
    }

    /// `th` holds each pedestrian's temporal embedding at the snapshot step,
    /// stacked like the scenes.
    pub fn forward(&self, tape: &mut Tape, scenes: &[SpatialInput], th: Var) -> Result<SpatialOutput> {
        let mut graphs = Vec::with_capacity(scenes.len());
        let mut offsets = Vec::with_capacity(scenes.len());
        let mut rel = Vec::new();
        let mut steer = Vec::new();
        let mut total = 0;
        for s in scenes {
            if s.target >= s.now.len() {
                return Err(Error::Contract(format!("target {} outside scene of {}", s.target, s.now.len())));
            }
            let g = build_spatial_adjacency(&s.prev, &s.now)?;
            let dir_t = g.walk_dirs()[s.target];
            for i in 0..g.len() {
                rel.extend_from_slice(&g.rel_pos(s.target, i));
                steer.push(steering_cosine(dir_t, g.walk_dirs()[i]));
            }
            offsets.push(total);
            total += g.len();
            graphs.push(g);
        }
        if tape.shape(th) != [total, self.config.width] {
            return Err(Error::Contract(format!(
                "temporal embeddings have shape {:?}, expected [{total}, {}]",
                tape.shape(th),
                self.config.width
            )));
        }
        let mut v = th;
        if self.config.position_embedding {
            let x = tape.constant(Tensor::from_fn(&[total, 2], |i| rel[i]))?;
            let r = self.position.forward(tape, x)?;
            let r = tape.relu(r)?;
            v = tape.add(v, r)?;
        }
        if self.config.steering_embedding {
            let x = tape.constant(Tensor::from_fn(&[total, 1], |i| steer[i]))?;
            let s = self.steering.forward(tape, x)?;
            let s = tape.relu(s)?;
            v = tape.add(v, s)?;
        }
        let segments: Vec<Segment> = graphs
            .iter()
            .zip(&offsets)
            .map(|(g, &o)| Segment::new(o, g.len(), self.config.fov_mask.then(|| g.keep())))
            .collect();
        let att = self.block.forward(tape, v, &segments)?;
        Ok(SpatialOutput {
            out: att.out,
            offsets,
            weights: att.weights,
            graphs,
        })
    }
}
