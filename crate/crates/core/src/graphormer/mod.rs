//! Dual graph-attention encoder: a causal temporal graphormer per
//! pedestrian and a field-of-view spatial graphormer per scene.

mod adjacency;
mod encoder;
mod spatial;
mod temporal;

pub use adjacency::{
    build_spatial_adjacency, build_temporal_adjacency, steering_cosine, SpatialGraph, TemporalGraph, STATIONARY_EPS,
};
pub use encoder::{DualGraphormer, EncodedScene, SceneInput};
pub use spatial::{SpatialGraphormer, SpatialInput, SpatialOutput};
pub use temporal::{GruEncoder, TemporalEncoder, TemporalGraphormer, TemporalOutput};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalKind {
    Graphormer,
    /// Recurrent fallback used by the "no temporal graphormer" ablation.
    Gru,
}

/// Encoder width, head count and per-component switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub width: usize,
    pub heads: usize,
    /// Length of the learnable positional table.
    pub max_steps: usize,
    pub temporal: TemporalKind,
    pub centrality: bool,
    pub positional: bool,
    pub causal_mask: bool,
    /// Spatial graphormer on/off; when off the social vector is the target's
    /// temporal embedding alone.
    pub spatial: bool,
    pub position_embedding: bool,
    pub steering_embedding: bool,
    pub fov_mask: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            width: 256,
            heads: 4,
            max_steps: 20,
            temporal: TemporalKind::Graphormer,
            centrality: true,
            positional: true,
            causal_mask: true,
            spatial: true,
            position_embedding: true,
            steering_embedding: true,
            fov_mask: true,
        }
    }
}
