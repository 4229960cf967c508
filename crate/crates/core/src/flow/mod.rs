//! Conditional normalizing flow over motion-behavior vectors: a stack of
//! (pattern normalization, invertible linear map, affine coupling) steps
//! with exact log-determinant accounting.

mod coupling;
mod inv_linear;
mod pattern_norm;

pub use coupling::{AffineCoupling, LOG_SCALE_CLAMP};
pub use inv_linear::{InvertibleLinear, MIN_ABS_DET};
pub use pattern_norm::{PatternNorm, MIN_CHANNEL_STD};

use std::f64::consts::PI;

use numcore::{NumError, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub channels: usize,
    pub steps: usize,
    /// Hidden width of each coupling's conditioning network.
    pub coupling_hidden: usize,
    pub pattern_norm: bool,
    /// Multi-scale schedule: after every `factor_every` steps (never after
    /// the last) `factor_channels` channels leave the flow for the base
    /// density.
    pub factor_out: bool,
    pub factor_every: usize,
    pub factor_channels: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            channels: 256,
            steps: 16,
            coupling_hidden: 256,
            pattern_norm: true,
            factor_out: true,
            factor_every: 4,
            factor_channels: 64,
        }
    }
}

impl FlowConfig {
    /// Active channel width of each step.
    pub fn widths(&self) -> Result<Vec<usize>> {
        if self.steps == 0 {
            return Err(Error::Config("flow needs at least one step".into()));
        }
        let mut width = self.channels;
        let mut widths = Vec::with_capacity(self.steps);
        for j in 0..self.steps {
            if width < 2 || width % 2 != 0 {
                return Err(Error::Config(format!("flow step {j} would have odd or empty width {width}")));
            }
            widths.push(width);
            if self.factor_out && (j + 1) % self.factor_every.max(1) == 0 && j + 1 < self.steps {
                if self.factor_channels >= width {
                    return Err(Error::Config(format!(
                        "factoring out {} channels leaves nothing of width {width}",
                        self.factor_channels
                    )));
                }
                width -= self.factor_channels;
            }
        }
        Ok(widths)
    }
}

/// Isotropic Gaussian `N(0, σ²I)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseDensity {
    pub dim: usize,
    pub sigma: f64,
}

impl BaseDensity {
    pub fn new(dim: usize, sigma: f64) -> Self {
        Self { dim, sigma }
    }

    fn constant(&self) -> f64 {
        -0.5 * self.dim as f64 * (2.0 * PI * self.sigma * self.sigma).ln()
    }

    pub fn log_prob(&self, z: &[f64]) -> f64 {
        let sq: f64 = z.iter().map(|v| v * v).sum();
        -0.5 * sq / (self.sigma * self.sigma) + self.constant()
    }

    /// Row-wise log-density of `z` (`B×dim`), returned as `B×1`.
    pub fn log_prob_var(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let sq = tape.square(z)?;
        let sq = tape.sum_cols(sq)?;
        let lp = tape.scale(sq, -0.5 / (self.sigma * self.sigma))?;
        Ok(tape.shift(lp, self.constant())?)
    }
}

#[derive(Debug, Clone)]
pub struct FlowStep {
    pub norm: Option<PatternNorm>,
    pub linear: InvertibleLinear,
    pub coupling: AffineCoupling,
    width: usize,
}

impl FlowStep {
    pub fn width(&self) -> usize {
        self.width
    }
}

/// Forward pass result: latent `z` (`B×C`), total per-sample
/// log-determinant (`B×1`), and each step's contribution (`B×1`).
#[derive(Debug, Clone)]
pub struct FlowOutput {
    pub z: Var,
    pub logdet: Var,
    pub step_logdets: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct FlowStack {
    steps: Vec<FlowStep>,
    config: FlowConfig,
    cond_dim: usize,
}

fn tag_step(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Num(NumError::NonFinite { .. }) => Error::NonFiniteLikelihood { step },
        e => e,
    }
}

impl FlowStack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: &FlowConfig,
        cond_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let widths = config.widths()?;
        let mut steps = Vec::with_capacity(widths.len());
        for (j, &w) in widths.iter().enumerate() {
            let prefix = format!("{name}.{j}");
            let norm = config.pattern_norm.then(|| PatternNorm::new(store, &format!("{prefix}.norm"), w));
            let linear = InvertibleLinear::new(store, &format!("{prefix}.linear"), w, rng);
            let coupling = AffineCoupling::new(
                store,
                &format!("{prefix}.coupling"),
                w,
                cond_dim,
                config.coupling_hidden,
                rng,
            )?;
            steps.push(FlowStep {
                norm,
                linear,
                coupling,
                width: w,
            });
        }
        Ok(Self {
            steps,
            config: *config,
            cond_dim,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn steps(&self) -> &[FlowStep] {
        &self.steps
    }

    pub fn is_initialized(&self) -> bool {
        self.steps.iter().all(|s| s.norm.as_ref().is_none_or(PatternNorm::is_initialized))
    }

    pub fn mark_initialized(&mut self) {
        for s in &mut self.steps {
            if let Some(n) = &mut s.norm {
                n.mark_initialized();
            }
        }
    }

    /// Data-dependent initialization of every pattern normalization: each
    /// layer whitens the batch as it arrives after the preceding steps.
    pub fn initialize(&mut self, store: &mut ParamStore, x: &Tensor, cond: &Tensor) -> Result<()> {
        let mut h = x.clone();
        for j in 0..self.steps.len() {
            if let Some(norm) = &mut self.steps[j].norm {
                if !norm.is_initialized() {
                    norm.initialize(store, &h)?;
                }
            }
            let mut tape = Tape::with_params(store);
            let hv = tape.constant(h)?;
            let cv = tape.constant(cond.clone())?;
            let (y, _) = self.step_forward(&mut tape, j, hv, cv)?;
            h = tape.value(y).clone();
            if j + 1 < self.steps.len() && self.steps[j + 1].width < self.steps[j].width {
                let keep = self.steps[j + 1].width;
                let (rows, cols) = h.dims2()?;
                h = Tensor::from_fn(&[rows, keep], |i| h.get2(i / keep, i % keep));
                debug_assert!(cols > keep);
            }
        }
        Ok(())
    }

    fn step_forward(&self, tape: &mut Tape, j: usize, x: Var, cond: Var) -> Result<(Var, Var)> {
        let step = &self.steps[j];
        let run = |tape: &mut Tape| -> Result<(Var, Var)> {
            let mut h = x;
            let mut scalar: Option<Var> = None;
            if let Some(norm) = &step.norm {
                let (y, ld) = norm.forward(tape, h)?;
                h = y;
                scalar = Some(ld);
            }
            let (y, ld) = step.linear.forward(tape, h, j)?;
            let scalar = match scalar {
                Some(s) => tape.add(s, ld)?,
                None => ld,
            };
            let (y, ld) = step.coupling.forward(tape, y, cond)?;
            let total = tape.add_scalar(ld, scalar)?;
            Ok((y, total))
        };
        run(tape).map_err(tag_step(j))
    }

    fn step_reverse(&self, tape: &mut Tape, j: usize, y: Var, cond: Var) -> Result<Var> {
        let step = &self.steps[j];
        let h = step.coupling.reverse(tape, y, cond)?;
        let h = step.linear.reverse(tape, h, j)?;
        match &step.norm {
            Some(norm) => norm.reverse(tape, h),
            None => Ok(h),
        }
    }

    /// Runs every step on `x` (`B×C`) conditioned on `cond` (`B×D_st`).
    pub fn forward(&self, tape: &mut Tape, x: Var, cond: Var) -> Result<FlowOutput> {
        self.check_shapes(tape, x, cond)?;
        let mut h = x;
        let mut parked = Vec::new();
        let mut step_logdets = Vec::with_capacity(self.steps.len());
        for j in 0..self.steps.len() {
            let (y, ld) = self.step_forward(tape, j, h, cond)?;
            step_logdets.push(ld);
            h = y;
            if let Some(next) = self.steps.get(j + 1) {
                let w = self.steps[j].width;
                if next.width < w {
                    parked.push(tape.slice_cols(h, next.width, w)?);
                    h = tape.slice_cols(h, 0, next.width)?;
                }
            }
        }
        let z = if parked.is_empty() {
            h
        } else {
            let mut parts = vec![h];
            parts.extend(parked.iter().rev());
            tape.concat_cols(&parts)?
        };
        let logdet = if step_logdets.len() == 1 {
            step_logdets[0]
        } else {
            let mut acc = tape.add(step_logdets[0], step_logdets[1])?;
            for &ld in &step_logdets[2..] {
                acc = tape.add(acc, ld)?;
            }
            acc
        };
        Ok(FlowOutput { z, logdet, step_logdets })
    }

    /// Exact inverse of [`FlowStack::forward`] for the same conditioning.
    pub fn reverse(&self, tape: &mut Tape, z: Var, cond: Var) -> Result<Var> {
        self.check_shapes(tape, z, cond)?;
        let last = self.steps.len() - 1;
        let mut h = tape.slice_cols(z, 0, self.steps[last].width)?;
        for j in (0..self.steps.len()).rev() {
            h = self.step_reverse(tape, j, h, cond)?;
            if j > 0 && self.steps[j - 1].width > self.steps[j].width {
                let parked = tape.slice_cols(z, self.steps[j].width, self.steps[j - 1].width)?;
                h = tape.concat_cols(&[h, parked])?;
            }
        }
        Ok(h)
    }

    fn check_shapes(&self, tape: &Tape, x: Var, cond: Var) -> Result<()> {
        let xs = tape.shape(x);
        let cs = tape.shape(cond);
        if xs.len() != 2 || xs[1] != self.config.channels || cs.len() != 2 || cs[1] != self.cond_dim || cs[0] != xs[0] {
            return Err(Error::Contract(format!(
                "flow expects B×{} inputs with B×{} conditioning, got {xs:?} and {cs:?}",
                self.config.channels, self.cond_dim
            )));
        }
        Ok(())
    }

    /// `|det W|` check for every step.
    pub fn check_weights(&self, store: &ParamStore) -> Result<()> {
        for (j, s) in self.steps.iter().enumerate() {
            s.linear.check(store.get(s.linear.weight()), j)?;
        }
        Ok(())
    }

    /// `-(1/B) Σ_b [log p(z_b) + logdet_b]`.
    pub fn nll(&self, tape: &mut Tape, x: Var, cond: Var, base: &BaseDensity) -> Result<(Var, FlowOutput)> {
        let out = self.forward(tape, x, cond)?;
        let lp = base.log_prob_var(tape, out.z)?;
        let ll = tape.add(lp, out.logdet)?;
        let mean = tape.mean(ll)?;
        let loss = tape.neg(mean)?;
        if !tape.value(loss).data()[0].is_finite() {
            return Err(Error::NonFiniteLikelihood { step: self.steps.len() });
        }
        Ok((loss, out))
    }

    /// Draws `K` latents per conditioning row from `N(0, σ²I)` and maps them
    /// back through the flow. Rows come out row-major over `(b, k)`.
    pub fn sample<R: Rng + ?Sized>(&self, tape: &mut Tape, cond: Var, k: usize, sigma: f64, rng: &mut R) -> Result<Var> {
        if k == 0 {
            return Err(Error::Contract("at least one sample required".into()));
        }
        let b = tape.shape(cond)[0];
        let c = self.config.channels;
        let z = Tensor::from_fn(&[b * k, c], |_| {
            let u: f64 = StandardNormal.sample(rng);
            sigma * u
        });
        let z = tape.constant(z)?;
        let index: Vec<usize> = (0..b * k).map(|r| r / k).collect();
        let cond = tape.gather_rows(cond, &index)?;
        self.reverse(tape, z, cond)
    }
}

/// [`FlowStack::nll`] as a free function.
pub fn nll_loss(tape: &mut Tape, stack: &FlowStack, x: Var, cond: Var, base: &BaseDensity) -> Result<Var> {
    stack.nll(tape, x, cond, base).map(|(l, _)| l)
}

/// [`FlowStack::sample`] as a free function.
pub fn sample_behaviors<R: Rng + ?Sized>(
    tape: &mut Tape,
    stack: &FlowStack,
    cond: Var,
    k: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<Var> {
    stack.sample(tape, cond, k, sigma, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn widths_follow_factor_schedule() {
        let c = FlowConfig::default();
        assert_eq!(c.widths().unwrap(), [vec![256; 4], vec![192; 4], vec![128; 4], vec![64; 4]].concat());
        let off = FlowConfig {
            factor_out: false,
            ..c
        };
        assert_eq!(off.widths().unwrap(), vec![256; 16]);
        let bad = FlowConfig {
            channels: 64,
            ..c
        };
        assert!(matches!(bad.widths(), Err(Error::Config(_))));
    }

    #[test]
    fn base_density_at_origin() {
        let base = BaseDensity::new(2, 1.0);
        assert!((base.log_prob(&[0.0, 0.0]) + (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn factored_flow_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let config = FlowConfig {
            channels: 8,
            steps: 5,
            coupling_hidden: 6,
            pattern_norm: true,
            factor_out: true,
            factor_every: 2,
            factor_channels: 2,
        };
        let mut flow = FlowStack::new(&mut store, "flow", &config, 3, &mut rng).unwrap();
        let x = Tensor::from_fn(&[6, 8], |i| ((i * 7919) % 101) as f64 / 50.0 - 1.0);
        let cond = Tensor::from_fn(&[6, 3], |i| ((i * 31) % 7) as f64 / 3.0);
        flow.initialize(&mut store, &x, &cond).unwrap();
        let mut tape = Tape::with_params(&store);
        let xv = tape.constant(x.clone()).unwrap();
        let cv = tape.constant(cond).unwrap();
        let out = flow.forward(&mut tape, xv, cv).unwrap();
        let back = flow.reverse(&mut tape, out.z, cv).unwrap();
        assert!(tape.value(back).max_abs_diff(&x) < 1e-12);
    }
}
