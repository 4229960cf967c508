//! Layer building blocks shared by the encoder, flow and decoder.

use std::rc::Rc;

use numcore::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// `y = x·W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    /// Uniform init in `±1/sqrt(in_dim)`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.register(format!("{name}.weight"), uniform(&[in_dim, out_dim], bound, rng));
        let bias = store.register(format!("{name}.bias"), uniform(&[out_dim], bound, rng));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.register(format!("{name}.weight"), Tensor::zeros(&[in_dim, out_dim]));
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight)?;
        let b = tape.param(self.bias)?;
        let h = tape.matmul(x, w)?;
        Ok(tape.add_row(h, b)?)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(match self {
            Activation::Relu => tape.relu(x)?,
            Activation::Gelu => tape.gelu(x)?,
        })
    }
}

/// Stack of linear layers with an activation between (not after) them.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    activation: Activation,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, widths: &[usize], activation: Activation, rng: &mut R) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, activation }
    }

    pub fn forward(&self, tape: &mut Tape, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, x)?;
            if i < last {
                x = self.activation.apply(tape, x)?;
            }
        }
        Ok(x)
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }
}

/// Gated recurrent cell (reset, update and candidate gates).
#[derive(Debug, Clone)]
pub struct GruCell {
    input: Linear,
    hidden: Linear,
    width: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, width: usize, rng: &mut R) -> Self {
        Self {
            input: Linear::new(store, &format!("{name}.input"), in_dim, 3 * width, rng),
            hidden: Linear::new(store, &format!("{name}.hidden"), width, 3 * width, rng),
            width,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// One step: `h' = (1 - z) ⊙ n + z ⊙ h`.
    pub fn step(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var> {
        let w = self.width;
        let gi = self.input.forward(tape, x)?;
        let gh = self.hidden.forward(tape, h)?;
        let ri = tape.slice_cols(gi, 0, w)?;
        let zi = tape.slice_cols(gi, w, 2 * w)?;
        let ni = tape.slice_cols(gi, 2 * w, 3 * w)?;
        let rh = tape.slice_cols(gh, 0, w)?;
        let zh = tape.slice_cols(gh, w, 2 * w)?;
        let nh = tape.slice_cols(gh, 2 * w, 3 * w)?;
        let r = tape.add(ri, rh)?;
        let r = tape.sigmoid(r)?;
        let z = tape.add(zi, zh)?;
        let z = tape.sigmoid(z)?;
        let gated = tape.mul(r, nh)?;
        let n = tape.add(ni, gated)?;
        let n = tape.tanh(n)?;
        // h' = n + z ⊙ (h - n)
        let diff = tape.sub(h, n)?;
        let keep = tape.mul(z, diff)?;
        Ok(tape.add(n, keep)?)
    }
}

/// Multi-head scaled dot-product self-attention; heads are concatenated and
/// passed through an output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    heads: usize,
    head_dim: usize,
}

/// Rows `start..start + len` of the input attend only among themselves.
/// `keep` (row-major `len×len`, query by key) marks admissible pairs;
/// masked pairs get their scores replaced before the softmax.
#[derive(Debug, Clone)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub keep: Option<Rc<[bool]>>,
}

impl Segment {
    pub fn new(start: usize, len: usize, keep: Option<Rc<[bool]>>) -> Self {
        Self { start, len, keep }
    }
}

/// Attention output together with each segment's per-head weight matrices.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Vec<Vec<Var>>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && width % heads == 0, "width {width} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.query"), width, width, rng),
            key: Linear::new(store, &format!("{name}.key"), width, width, rng),
            value: Linear::new(store, &format!("{name}.value"), width, width, rng),
            output: Linear::new(store, &format!("{name}.output"), width, width, rng),
            heads,
            head_dim: width / heads,
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Self-attention over independent row segments, which must tile the
    /// input in order.
    pub fn forward(&self, tape: &mut Tape, x: Var, segments: &[Segment]) -> Result<AttentionOutput> {
        let rows = tape.shape(x)[0];
        let mut cursor = 0;
        for s in segments {
            if s.start != cursor || s.len == 0 || s.keep.as_ref().is_some_and(|k| k.len() != s.len * s.len) {
                return Err(Error::Contract(format!("bad attention segment at row {}", s.start)));
            }
            cursor += s.len;
        }
        if cursor != rows {
            return Err(Error::Contract(format!("segments cover {cursor} of {rows} rows")));
        }
        let q = self.query.forward(tape, x)?;
        let k = self.key.forward(tape, x)?;
        let v = self.value.forward(tape, x)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let whole = segments.len() == 1;
        let mut seg_outs = Vec::with_capacity(segments.len());
        let mut weights = Vec::with_capacity(segments.len());
        for s in segments {
            let (qs, ks, vs) = if whole {
                (q, k, v)
            } else {
                let end = s.start + s.len;
                (
                    tape.slice_rows(q, s.start, end)?,
                    tape.slice_rows(k, s.start, end)?,
                    tape.slice_rows(v, s.start, end)?,
                )
            };
            let mut outs = Vec::with_capacity(self.heads);
            let mut seg_weights = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let (lo, hi) = (h * self.head_dim, (h + 1) * self.head_dim);
                let qh = tape.slice_cols(qs, lo, hi)?;
                let kh = tape.slice_cols(ks, lo, hi)?;
                let vh = tape.slice_cols(vs, lo, hi)?;
                let scores = tape.matmul_bt(qh, kh)?;
                let scores = tape.scale(scores, scale)?;
                let w = match &s.keep {
                    Some(mask) => tape.masked_softmax(scores, mask.clone())?,
                    None => tape.softmax(scores)?,
                };
                outs.push(tape.matmul(w, vh)?);
                seg_weights.push(w);
            }
            seg_outs.push(if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? });
            weights.push(seg_weights);
        }
        let cat = if whole { seg_outs[0] } else { tape.concat_rows(&seg_outs)? };
        let out = self.output.forward(tape, cat)?;
        Ok(AttentionOutput { out, weights })
    }
}

/// Attention sublayer followed by a feed-forward sublayer, each with a plain
/// residual connection.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    attention: MultiHeadAttention,
    ffn: Mlp,
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.attention"), width, heads, rng),
            ffn: Mlp::new(store, &format!("{name}.ffn"), &[width, 2 * width, width], Activation::Gelu, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, segments: &[Segment]) -> Result<AttentionOutput> {
        let att = self.attention.forward(tape, x, segments)?;
        let mid = tape.add(x, att.out)?;
        let ff = self.ffn.forward(tape, mid)?;
        let out = tape.add(mid, ff)?;
        Ok(AttentionOutput {
            out,
            weights: att.weights,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gru_with_saturated_update_gate_keeps_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "gru", 2, 3, &mut rng);
        // push the update-gate bias to +inf-ish so z == 1
        let b = store.get(cell.input.bias).clone();
        let mut data = b.into_data();
        data[3..6].iter_mut().for_each(|v| *v = 60.0);
        store.set(cell.input.bias, Tensor::new(vec![9], data).unwrap()).unwrap();
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::from_rows(&[&[0.3, -0.2]]).unwrap()).unwrap();
        let h = tape.constant(Tensor::from_rows(&[&[0.5, -1.0, 0.25]]).unwrap()).unwrap();
        let h2 = cell.step(&mut tape, x, h).unwrap();
        assert!(tape.value(h2).max_abs_diff(tape.value(h)) < 1e-12);
    }

    #[test]
    fn attention_weights_are_row_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "mha", 8, 4, &mut rng);
        let mut tape = Tape::with_params(&store);
        let x = tape
            .constant(Tensor::from_fn(&[5, 8], |i| ((i * 37) % 17) as f64 / 8.0 - 1.0))
            .unwrap();
        let segs = [Segment::new(0, 2, None), Segment::new(2, 3, None)];
        let out = mha.forward(&mut tape, x, &segs).unwrap();
        assert_eq!(tape.shape(out.out), &[5, 8]);
        assert_eq!(tape.shape(out.weights[1][0]), &[3, 3]);
        for w in out.weights.into_iter().flatten() {
            let rows = tape.shape(w)[0];
            for r in 0..rows {
                let s: f64 = tape.value(w).row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
