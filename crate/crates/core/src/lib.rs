//! Pedestrian trajectory prediction with a dual graph-attention encoder, a
//! conditional normalizing flow over motion behaviors, and a goal-conditioned
//! bidirectional decoder.

pub mod data;
pub mod decoder;
pub mod error;
pub mod flow;
pub mod graphormer;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};
