//! Goal-conditioned bidirectional trajectory decoder and the best-of-K
//! trajectory loss.

use numcore::{ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{dist, Point};
use crate::error::{Error, Result};
use crate::nn::{Activation, GruCell, Linear, Mlp};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub hidden: usize,
    /// When off only the forward recursion runs and it alone is supervised.
    pub bidirectional: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            bidirectional: true,
        }
    }
}

/// Weights of the goal, forward, backward and bidirectional terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lambda1: 0.25,
            lambda2: 0.25,
            lambda3: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.lambda1, self.lambda2, self.lambda3]
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// One decoded future in the scene-normalized frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedFuture {
    pub goal: Point,
    /// Steps `1..=t_p`.
    pub y_f: Vec<Point>,
    /// Steps `1..=t_p-1` (index `t-1` holds step `t`); empty when decoding
    /// forward only.
    pub y_b: Vec<Point>,
    /// Steps `1..=t_p`, the last being the goal; empty when decoding forward
    /// only.
    pub y_both: Vec<Point>,
}

impl DecodedFuture {
    /// The trajectory reported for evaluation.
    pub fn prediction(&self) -> &[Point] {
        if self.y_both.is_empty() {
            &self.y_f
        } else {
            &self.y_both
        }
    }
}

/// Decoder outputs on the tape for `R` rows; each per-step entry is `R×2`.
#[derive(Debug, Clone)]
pub struct DecodedBatch {
    pub rows: usize,
    pub goal: Var,
    pub y_f: Vec<Var>,
    pub y_b: Vec<Var>,
    pub y_both: Vec<Var>,
}

impl DecodedBatch {
    pub fn is_bidirectional(&self) -> bool {
        !self.y_both.is_empty()
    }

    /// Trajectory per row that metrics see (`Y_Both`, or `Y_F` when forward
    /// only).
    pub fn predictions(&self, tape: &Tape) -> Vec<Vec<Point>> {
        let steps = if self.is_bidirectional() { &self.y_both } else { &self.y_f };
        read_steps(tape, steps, self.rows)
    }

    pub fn to_futures(&self, tape: &Tape) -> Vec<DecodedFuture> {
        let goal = tape.value(self.goal);
        let y_f = read_steps(tape, &self.y_f, self.rows);
        let y_b = read_steps(tape, &self.y_b, self.rows);
        let y_both = read_steps(tape, &self.y_both, self.rows);
        (0..self.rows)
            .map(|r| DecodedFuture {
                goal: [goal.get2(r, 0), goal.get2(r, 1)],
                y_f: y_f[r].clone(),
                y_b: y_b[r].clone(),
                y_both: y_both[r].clone(),
            })
            .collect()
    }
}

fn read_steps(tape: &Tape, steps: &[Var], rows: usize) -> Vec<Vec<Point>> {
    (0..rows)
        .map(|r| {
            steps
                .iter()
                .map(|&v| {
                    let t = tape.value(v);
                    [t.get2(r, 0), t.get2(r, 1)]
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Decoder {
    goal: Mlp,
    fwd_init: Mlp,
    fwd_input: Mlp,
    fwd_gru: GruCell,
    fwd_out: Linear,
    bwd_init: Mlp,
    bwd_input: Mlp,
    bwd_gru: GruCell,
    bwd_out: Linear,
    both_out: Linear,
    config: DecoderConfig,
    horizon: usize,
}

impl Decoder {
    /// `in_dim` is the behavior width, `horizon` the number of predicted
    /// steps.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        horizon: usize,
        config: &DecoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("prediction horizon must be at least one step".into()));
        }
        let h = config.hidden;
        let act = Activation::Gelu;
        Ok(Self {
            goal: Mlp::new(store, &format!("{name}.goal"), &[in_dim, h, 2], act, rng),
            fwd_init: Mlp::new(store, &format!("{name}.fwd_init"), &[in_dim, h, h], act, rng),
            fwd_input: Mlp::new(store, &format!("{name}.fwd_input"), &[h, h], act, rng),
            fwd_gru: GruCell::new(store, &format!("{name}.fwd_gru"), h, h, rng),
            fwd_out: Linear::new(store, &format!("{name}.fwd_out"), h + in_dim, 2, rng),
            bwd_init: Mlp::new(store, &format!("{name}.bwd_init"), &[in_dim, h, h], act, rng),
            bwd_input: Mlp::new(store, &format!("{name}.bwd_input"), &[2, h, h], act, rng),
            bwd_gru: GruCell::new(store, &format!("{name}.bwd_gru"), h, h, rng),
            bwd_out: Linear::new(store, &format!("{name}.bwd_out"), h + in_dim, 2, rng),
            both_out: Linear::new(store, &format!("{name}.both_out"), 2 * h, 2, rng),
            config: *config,
            horizon,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn goal_head(&self) -> &Mlp {
        &self.goal
    }

    /// Decodes every row of `mb` (`R×C`).
    pub fn decode(&self, tape: &mut Tape, mb: Var) -> Result<DecodedBatch> {
        let rows = tape.shape(mb)[0];
        let tp = self.horizon;
        let goal = self.goal.forward(tape, mb)?;

        let mut f_h = self.fwd_init.forward(tape, mb)?;
        let mut f_i = self.fwd_input.forward(tape, f_h)?;
        // f_is[t-1] holds f_i at step t
        let mut f_is = Vec::with_capacity(tp);
        let mut y_f = Vec::with_capacity(tp);
        for _ in 0..tp {
            f_h = self.fwd_gru.step(tape, f_i, f_h)?;
            f_i = self.fwd_input.forward(tape, f_h)?;
            let cat = tape.concat_cols(&[f_i, mb])?;
            y_f.push(self.fwd_out.forward(tape, cat)?);
            f_is.push(f_i);
        }
        if !self.config.bidirectional {
            return Ok(DecodedBatch {
                rows,
                goal,
                y_f,
                y_b: Vec::new(),
                y_both: Vec::new(),
            });
        }

        let mut b_h = self.bwd_init.forward(tape, mb)?;
        let mut b_i = self.bwd_input.forward(tape, goal)?;
        let mut y_b = vec![goal; tp - 1];
        let mut y_both = vec![goal; tp];
        for tb in (1..tp).rev() {
            b_h = self.bwd_gru.step(tape, b_i, b_h)?;
            let cat = tape.concat_cols(&[b_h, mb])?;
            y_b[tb - 1] = self.bwd_out.forward(tape, cat)?;
            let cat = tape.concat_cols(&[b_h, f_is[tb - 1]])?;
            let both = self.both_out.forward(tape, cat)?;
            y_both[tb - 1] = both;
            b_i = self.bwd_input.forward(tape, both)?;
        }
        Ok(DecodedBatch {
            rows,
            goal,
            y_f,
            y_b,
            y_both,
        })
    }
}

/// Best-of-K trajectory loss for each of `B` targets whose `K` decoded
/// samples occupy consecutive rows of `batch`. The goal minimum and the
/// trajectory-sum minimum are taken independently; ties go to the lowest
/// sample index. Forward-only batches are scored on `Y_F` alone.
pub fn trajectory_losses(
    tape: &mut Tape,
    batch: &DecodedBatch,
    gts: &[&[Point]],
    k: usize,
    weights: &LossWeights,
) -> Result<Vec<Var>> {
    if k == 0 {
        return Err(Error::Contract("trajectory loss needs at least one sample".into()));
    }
    if batch.rows != gts.len() * k {
        return Err(Error::Contract(format!(
            "{} decoded rows do not match {} targets × {k} samples",
            batch.rows,
            gts.len()
        )));
    }
    let tp = batch.y_f.len();
    if gts.iter().any(|g| g.len() != tp) {
        return Err(Error::Contract(format!("ground truth must have {tp} steps")));
    }
    let step_gt = |t: usize| Tensor::from_fn(&[batch.rows, 2], |i| gts[i / 2 / k][t][i % 2]);
    let mut traj: Option<Var> = None;
    let mut push = |tape: &mut Tape, pred: Var, target: Var, w: f64| -> Result<()> {
        if w == 0.0 {
            return Ok(());
        }
        let d = tape.sub(pred, target)?;
        let n = tape.row_norm(d)?;
        let n = tape.scale(n, w)?;
        traj = Some(match traj {
            Some(acc) => tape.add(acc, n)?,
            None => n,
        });
        Ok(())
    };
    let bidirectional = batch.is_bidirectional();
    for t in 0..tp {
        let y = tape.constant(step_gt(t))?;
        if bidirectional {
            push(tape, batch.y_f[t], y, weights.lambda1)?;
            if t + 1 < tp {
                push(tape, batch.y_b[t], y, weights.lambda2)?;
            }
            push(tape, batch.y_both[t], y, weights.lambda3)?;
        } else {
            push(tape, batch.y_f[t], y, 1.0)?;
        }
    }
    let goal_term = if bidirectional && weights.alpha != 0.0 {
        let g = tape.constant(step_gt(tp - 1))?;
        let d = tape.sub(batch.goal, g)?;
        Some(tape.row_norm(d)?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(gts.len());
    for b in 0..gts.len() {
        let (lo, hi) = (b * k, (b + 1) * k);
        let mut loss = match traj {
            Some(tr) => {
                let s = tape.slice_rows(tr, lo, hi)?;
                Some(tape.min(s)?)
            }
            None => None,
        };
        if let Some(gd) = goal_term {
            let s = tape.slice_rows(gd, lo, hi)?;
            let m = tape.min(s)?;
            let m = tape.scale(m, weights.alpha)?;
            loss = Some(match loss {
                Some(l) => tape.add(l, m)?,
                None => m,
            });
        }
        out.push(match loss {
            Some(l) => l,
            None => tape.constant(Tensor::scalar(0.0))?,
        });
    }
    Ok(out)
}

/// Value-level loss of `K` decoded samples against one ground truth.
pub fn trajectory_loss(samples: &[DecodedFuture], gt: &[Point], weights: &LossWeights) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract("trajectory loss needs at least one sample".into()));
    }
    let tp = gt.len();
    let mut best_goal = f64::INFINITY;
    let mut best_traj = f64::INFINITY;
    let mut bidirectional = false;
    for s in samples {
        if s.y_f.len() != tp {
            return Err(Error::Contract(format!("sample has {} steps, ground truth {tp}", s.y_f.len())));
        }
        bidirectional = !s.y_both.is_empty();
        let mut traj = 0.0;
        for t in 0..tp {
            if bidirectional {
                traj += weights.lambda1 * dist(s.y_f[t], gt[t]);
                if t + 1 < tp {
                    traj += weights.lambda2 * dist(s.y_b[t], gt[t]);
                }
                traj += weights.lambda3 * dist(s.y_both[t], gt[t]);
            } else {
                traj += dist(s.y_f[t], gt[t]);
            }
        }
        best_traj = best_traj.min(traj);
        best_goal = best_goal.min(dist(s.goal, gt[tp - 1]));
    }
    Ok(if bidirectional {
        weights.alpha * best_goal + best_traj
    } else {
        best_traj
    })
}

/// `L_p + Σ_i L_traj,i`.
pub fn total_loss(tape: &mut Tape, l_p: Var, traj: &[Var]) -> Result<Var> {
    let mut acc = l_p;
    for &t in traj {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}
