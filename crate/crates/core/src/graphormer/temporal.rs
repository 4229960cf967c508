//! Temporal encoders: the causal graphormer and its recurrent fallback.

use numcore::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use super::adjacency::{build_temporal_adjacency, TemporalGraph};
use super::{EncoderConfig, TemporalKind};
use crate::data::Point;
use crate::error::{Error, Result};
use crate::nn::{Activation, EncoderBlock, GruCell, Linear, Mlp, Segment};

fn check_trajs(trajs: &[&[Point]]) -> Result<usize> {
    let t = trajs.first().map(|t| t.len()).ok_or_else(|| Error::Contract("no trajectories to encode".into()))?;
    if t == 0 {
        return Err(Error::EmptyWindow);
    }
    if trajs.iter().any(|tr| tr.len() != t) {
        return Err(Error::Contract("trajectories in one encoder call must share a length".into()));
    }
    if trajs.iter().flat_map(|tr| tr.iter()).flatten().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite position fed to temporal encoder".into()));
    }
    Ok(t)
}

fn positions_tensor(trajs: &[&[Point]]) -> Tensor {
    let data: Vec<f64> = trajs.iter().flat_map(|tr| tr.iter()).flatten().copied().collect();
    let rows = data.len() / 2;
    Tensor::from_fn(&[rows, 2], |i| data[i])
}

/// Node embedding `MLP(x) + C + P` followed by one masked attention block.
#[derive(Debug, Clone)]
pub struct TemporalGraphormer {
    node_mlp: Mlp,
    centrality: Linear,
    positional: ParamId,
    block: EncoderBlock,
    config: EncoderConfig,
}

/// Per-step embeddings for `M` trajectories of `T` steps, stacked
/// trajectory-major as `(M·T)×D`, plus per-trajectory attention weights.
#[derive(Debug, Clone)]
pub struct TemporalOutput {
    pub out: Var,
    pub steps: usize,
    pub weights: Vec<Vec<Var>>,
    pub graph: TemporalGraph,
}

impl TemporalOutput {
    /// Row index of step `t` of trajectory `m`.
    pub fn row(&self, m: usize, t: usize) -> usize {
        m * self.steps + t
    }
}

impl TemporalGraphormer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: &EncoderConfig, rng: &mut R) -> Self {
        let d = config.width;
        let table = Tensor::from_fn(&[config.max_steps, d], |_| rng.random_range(-0.1..0.1));
        Self {
            node_mlp: Mlp::new(store, &format!("{name}.node"), &[2, d, d], Activation::Gelu, rng),
            centrality: Linear::new(store, &format!("{name}.centrality"), 1, d, rng),
            positional: store.register(format!("{name}.positional"), table),
            block: EncoderBlock::new(store, &format!("{name}.block"), d, config.heads, rng),
            config: *config,
        }
    }

    pub fn forward(&self, tape: &mut Tape, trajs: &[&[Point]]) -> Result<TemporalOutput> {
        let t = check_trajs(trajs)?;
        if t > self.config.max_steps {
            return Err(Error::Config(format!(
                "{t} steps exceed the positional table length {}",
                self.config.max_steps
            )));
        }
        let m = trajs.len();
        let graph = if self.config.causal_mask {
            build_temporal_adjacency(t)?
        } else {
            TemporalGraph::dense(t)?
        };
        let x = tape.constant(positions_tensor(trajs))?;
        let mut h = self.node_mlp.forward(tape, x)?;
        if self.config.centrality {
            let deg = graph.degrees();
            let deg = tape.constant(Tensor::from_fn(&[m * t, 1], |i| deg[i % t] as f64))?;
            let c = self.centrality.forward(tape, deg)?;
            h = tape.add(h, c)?;
        }
        if self.config.positional {
            let table = tape.param(self.positional)?;
            let index: Vec<usize> = (0..m * t).map(|i| i % t).collect();
            let p = tape.gather_rows(table, &index)?;
            h = tape.add(h, p)?;
        }
        let keep = self.config.causal_mask.then(|| graph.keep());
        let segments: Vec<Segment> = (0..m).map(|i| Segment::new(i * t, t, keep.clone())).collect();
        let att = self.block.forward(tape, h, &segments)?;
        Ok(TemporalOutput {
            out: att.out,
            steps: t,
            weights: att.weights,
            graph,
        })
    }
}

/// Recurrent encoder over positions; the hidden state after each step plays
/// the role of that step's embedding.
#[derive(Debug, Clone)]
pub struct GruEncoder {
    embed: Linear,
    cell: GruCell,
}

impl GruEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: &EncoderConfig, rng: &mut R) -> Self {
        let d = config.width;
        Self {
            embed: Linear::new(store, &format!("{name}.embed"), 2, d, rng),
            cell: GruCell::new(store, &format!("{name}.gru"), d, d, rng),
        }
    }

    /// Final hidden state per trajectory, `M×D`.
    pub fn forward_last(&self, tape: &mut Tape, trajs: &[&[Point]]) -> Result<Var> {
        let t = check_trajs(trajs)?;
        let m = trajs.len();
        let mut h = tape.constant(Tensor::zeros(&[m, self.cell.width()]))?;
        for step in 0..t {
            let x = Tensor::from_fn(&[m, 2], |i| trajs[i / 2][step][i % 2]);
            let x = tape.constant(x)?;
            let e = self.embed.forward(tape, x)?;
            let e = tape.gelu(e)?;
            h = self.cell.step(tape, e, h)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub enum TemporalEncoder {
    Graphormer(TemporalGraphormer),
    Gru(GruEncoder),
}

impl TemporalEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: &EncoderConfig, rng: &mut R) -> Self {
        match config.temporal {
            TemporalKind::Graphormer => Self::Graphormer(TemporalGraphormer::new(store, name, config, rng)),
            TemporalKind::Gru => Self::Gru(GruEncoder::new(store, name, config, rng)),
        }
    }

    /// Embedding at the final step of each trajectory, `M×D`.
    pub fn forward_last(&self, tape: &mut Tape, trajs: &[&[Point]]) -> Result<Var> {
        match self {
            Self::Graphormer(g) => {
                let out = g.forward(tape, trajs)?;
                let index: Vec<usize> = (0..trajs.len()).map(|m| out.row(m, out.steps - 1)).collect();
                Ok(tape.gather_rows(out.out, &index)?)
            }
            Self::Gru(g) => g.forward_last(tape, trajs),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (ParamStore, TemporalGraphormer) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let config = EncoderConfig {
            width: 8,
            heads: 2,
            max_steps: 6,
            ..EncoderConfig::default()
        };
        let tg = TemporalGraphormer::new(&mut store, "tg", &config, &mut rng);
        (store, tg)
    }

    #[test]
    fn single_step_attends_only_to_itself() {
        let (store, tg) = small();
        let mut tape = Tape::with_params(&store);
        let traj: &[Point] = &[[0.4, -0.2]];
        let out = tg.forward(&mut tape, &[traj]).unwrap();
        assert_eq!(tape.shape(out.out), &[1, 8]);
        for w in &out.weights[0] {
            assert_eq!(tape.value(*w).data(), &[1.0]);
        }
    }

    #[test]
    fn too_long_trajectory_is_rejected() {
        let (store, tg) = small();
        let mut tape = Tape::with_params(&store);
        let traj = vec![[0.0, 0.0]; 7];
        assert!(matches!(tg.forward(&mut tape, &[&traj]), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_positions_are_data_errors() {
        let (store, tg) = small();
        let mut tape = Tape::with_params(&store);
        let traj = [[0.0, f64::INFINITY], [0.0, 0.0]];
        assert!(matches!(tg.forward(&mut tape, &[&traj]), Err(Error::Data(_))));
    }
}
