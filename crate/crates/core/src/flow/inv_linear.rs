//! Invertible channel-mixing linear map (the 1×1 convolution of Glow
//! applied to flat feature vectors).

use numcore::linalg::{self, random_rotation};
use numcore::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

/// `|det W|` below this is treated as singular.
pub const MIN_ABS_DET: f64 = 1e-12;

/// `y = x·Wᵀ`.
#[derive(Debug, Clone)]
pub struct InvertibleLinear {
    weight: ParamId,
    channels: usize,
}

impl InvertibleLinear {
    /// Starts from a random rotation, so `log|det W| = 0`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        Self {
            weight: store.register(format!("{name}.weight"), random_rotation(channels, rng)),
            channels,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `log|det W|`, or [`Error::SingularWeight`] tagged with `step`.
    pub fn check(&self, w: &Tensor, step: usize) -> Result<f64> {
        let log_det = match linalg::log_abs_det(w) {
            Ok(v) => v,
            Err(_) => f64::NEG_INFINITY,
        };
        if log_det < MIN_ABS_DET.ln() {
            return Err(Error::SingularWeight { step, log_det });
        }
        Ok(log_det)
    }

    /// Returns `y` and the per-sample log-determinant (scalar var).
    pub fn forward(&self, tape: &mut Tape, x: Var, step: usize) -> Result<(Var, Var)> {
        let w = tape.param(self.weight)?;
        self.check(tape.value(w), step)?;
        let y = tape.matmul_bt(x, w)?;
        let logdet = tape.log_abs_det(w)?;
        Ok((y, logdet))
    }

    /// `x = y·W⁻ᵀ`.
    pub fn reverse(&self, tape: &mut Tape, y: Var, step: usize) -> Result<Var> {
        let w = tape.param(self.weight)?;
        self.check(tape.value(w), step)?;
        let inv = tape.inverse(w)?;
        Ok(tape.matmul_bt(y, inv)?)
    }
}
