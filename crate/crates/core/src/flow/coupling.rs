//! Affine coupling conditioned on the social-interaction vector.

use numcore::{ParamStore, Tape, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Linear;

/// Bound on the log-scale produced by the conditioning network.
pub const LOG_SCALE_CLAMP: f64 = 5.0;

/// The first half `x_a` passes through; the second half becomes
/// `exp(log s) ⊙ x_b + t` with `(log s, t)` computed from `(x_a, cond)`.
#[derive(Debug, Clone)]
pub struct AffineCoupling {
    hidden: Linear,
    out: Linear,
    channels: usize,
}

impl AffineCoupling {
    /// The output layer starts at zero so a fresh coupling is the identity.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cond_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if channels < 2 || channels % 2 != 0 {
            return Err(Error::Config(format!("coupling needs an even channel count, got {channels}")));
        }
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), channels / 2 + cond_dim, hidden, rng),
            out: Linear::zeros(store, &format!("{name}.out"), hidden, channels),
            channels,
        })
    }

    pub fn out_layer(&self) -> &Linear {
        &self.out
    }

    pub fn hidden_layer(&self) -> &Linear {
        &self.hidden
    }

    fn scale_shift(&self, tape: &mut Tape, xa: Var, cond: Var) -> Result<(Var, Var)> {
        let h = tape.concat_cols(&[xa, cond])?;
        let h = self.hidden.forward(tape, h)?;
        let h = tape.gelu(h)?;
        let o = self.out.forward(tape, h)?;
        let half = self.channels / 2;
        let log_s = tape.slice_cols(o, 0, half)?;
        let log_s = tape.clamp(log_s, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)?;
        let t = tape.slice_cols(o, half, self.channels)?;
        Ok((log_s, t))
    }

    /// Returns `y` and the per-sample log-determinant `Σ log s` (`B×1`).
    pub fn forward(&self, tape: &mut Tape, x: Var, cond: Var) -> Result<(Var, Var)> {
        let half = self.channels / 2;
        let xa = tape.slice_cols(x, 0, half)?;
        let xb = tape.slice_cols(x, half, self.channels)?;
        let (log_s, t) = self.scale_shift(tape, xa, cond)?;
        let s = tape.exp(log_s)?;
        let yb = tape.mul(s, xb)?;
        let yb = tape.add(yb, t)?;
        let y = tape.concat_cols(&[xa, yb])?;
        let logdet = tape.sum_cols(log_s)?;
        Ok((y, logdet))
    }

    /// `x_b = (y_b - t) ⊙ exp(-log s)`.
    pub fn reverse(&self, tape: &mut Tape, y: Var, cond: Var) -> Result<Var> {
        let half = self.channels / 2;
        let ya = tape.slice_cols(y, 0, half)?;
        let yb = tape.slice_cols(y, half, self.channels)?;
        let (log_s, t) = self.scale_shift(tape, ya, cond)?;
        let neg = tape.neg(log_s)?;
        let inv = tape.exp(neg)?;
        let xb = tape.sub(yb, t)?;
        let xb = tape.mul(xb, inv)?;
        Ok(tape.concat_cols(&[ya, xb])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use numcore::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fresh_coupling_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let c = AffineCoupling::new(&mut store, "c", 4, 3, 5, &mut rng).unwrap();
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0, 4.0]]).unwrap()).unwrap();
        let cond = tape.constant(Tensor::from_rows(&[&[0.1, 0.2, 0.3]]).unwrap()).unwrap();
        let (y, ld) = c.forward(&mut tape, x, cond).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(tape.value(ld).data(), &[0.0]);
    }

    #[test]
    fn unit_log_scale_gives_logdet_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let c = AffineCoupling::new(&mut store, "c", 4, 1, 3, &mut rng).unwrap();
        // bias of the scale half = 1, shift half = 0
        store.set(c.out.bias(), Tensor::new(vec![4], vec![1.0, 1.0, 0.0, 0.0]).unwrap()).unwrap();
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::from_rows(&[&[0.5, 0.5, 1.0, -1.0]]).unwrap()).unwrap();
        let cond = tape.constant(Tensor::from_rows(&[&[0.7]]).unwrap()).unwrap();
        let (y, ld) = c.forward(&mut tape, x, cond).unwrap();
        assert!((tape.value(ld).data()[0] - 2.0).abs() < 1e-15);
        let e = 1f64.exp();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, e, -e]);
    }

    #[test]
    fn odd_width_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        assert!(matches!(
            AffineCoupling::new(&mut store, "c", 5, 1, 3, &mut rng),
            Err(Error::Config(_))
        ));
    }
}
