//! Per-channel affine normalization with data-dependent initialization.

use numcore::{ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Spread below which a channel cannot be normalized.
pub const MIN_CHANNEL_STD: f64 = 1e-8;

/// `y = s ⊙ x + b` with `s`, `b` shared across the sample axis.
#[derive(Debug, Clone)]
pub struct PatternNorm {
    scale: ParamId,
    bias: ParamId,
    channels: usize,
    initialized: bool,
}

impl PatternNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            scale: store.register(format!("{name}.scale"), Tensor::full(&[channels], 1.0)),
            bias: store.register(format!("{name}.bias"), Tensor::zeros(&[channels])),
            channels,
            initialized: false,
        }
    }

    pub fn scale(&self) -> ParamId {
        self.scale
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Marks the layer initialized without touching its parameters (used
    /// when parameters come from a checkpoint or are set by hand).
    pub fn mark_initialized(&mut self) {
        self.initialized = true;
    }

    /// Sets `s = 1/std`, `b = -mean/std` per channel from `batch` (`B×C`,
    /// population statistics), so the layer whitens that batch.
    pub fn initialize(&mut self, store: &mut ParamStore, batch: &Tensor) -> Result<()> {
        let (b, c) = batch.dims2()?;
        if c != self.channels {
            return Err(Error::Contract(format!("batch has {c} channels, layer has {}", self.channels)));
        }
        if b < 2 {
            return Err(Error::Contract(format!("data-dependent init needs at least 2 samples, got {b}")));
        }
        let mut scale = vec![0.0; c];
        let mut bias = vec![0.0; c];
        for ch in 0..c {
            let mean = (0..b).map(|i| batch.get2(i, ch)).sum::<f64>() / b as f64;
            let var = (0..b).map(|i| (batch.get2(i, ch) - mean).powi(2)).sum::<f64>() / b as f64;
            let std = var.sqrt();
            if !(std >= MIN_CHANNEL_STD) {
                return Err(Error::DegenerateChannel { channel: ch, std });
            }
            scale[ch] = 1.0 / std;
            bias[ch] = -mean / std;
        }
        store.set(self.scale, Tensor::new(vec![c], scale)?)?;
        store.set(self.bias, Tensor::new(vec![c], bias)?)?;
        self.initialized = true;
        Ok(())
    }

    fn ensure_initialized(&self) -> Result<()> {
        if self.initialized {
            Ok(())
        } else {
            Err(Error::Contract("pattern normalization used before initialization".into()))
        }
    }

    /// Returns `y` and the per-sample log-determinant `Σ_c log|s_c|` (scalar
    /// var, identical for every sample).
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        self.ensure_initialized()?;
        let s = tape.param(self.scale)?;
        let b = tape.param(self.bias)?;
        let y = tape.mul_row(x, s)?;
        let y = tape.add_row(y, b)?;
        let abs = tape.abs(s)?;
        let logs = tape.log(abs)?;
        let logdet = tape.sum(logs)?;
        Ok((y, logdet))
    }

    /// `x = (y - b) / s`.
    pub fn reverse(&self, tape: &mut Tape, y: Var) -> Result<Var> {
        self.ensure_initialized()?;
        let s = tape.param(self.scale)?;
        let b = tape.param(self.bias)?;
        let nb = tape.neg(b)?;
        let inv = tape.recip(s)?;
        let x = tape.add_row(y, nb)?;
        Ok(tape.mul_row(x, inv)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(scale: &[f64], bias: &[f64]) -> (ParamStore, PatternNorm) {
        let mut store = ParamStore::new();
        let mut pn = PatternNorm::new(&mut store, "pn", scale.len());
        store.set(pn.scale, Tensor::new(vec![scale.len()], scale.to_vec()).unwrap()).unwrap();
        store.set(pn.bias, Tensor::new(vec![bias.len()], bias.to_vec()).unwrap()).unwrap();
        pn.mark_initialized();
        (store, pn)
    }

    #[test]
    fn identity_parameters() {
        let (store, pn) = layer(&[1.0, 1.0], &[0.0, 0.0]);
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::from_rows(&[&[0.3, -2.0]]).unwrap()).unwrap();
        let (y, ld) = pn.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.3, -2.0]);
        assert_eq!(tape.value(ld).data(), &[0.0]);
        let back = pn.reverse(&mut tape, x).unwrap();
        assert_eq!(tape.value(back).data(), &[0.3, -2.0]);
    }

    #[test]
    fn doubling_scale_logdet() {
        let (store, pn) = layer(&[2.0; 3], &[0.0; 3]);
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::zeros(&[1, 3])).unwrap();
        let (_, ld) = pn.forward(&mut tape, x).unwrap();
        assert!((tape.value(ld).data()[0] - 3.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn init_whitens_shifted_channel() {
        let mut store = ParamStore::new();
        let mut pn = PatternNorm::new(&mut store, "pn", 1);
        // mean 3, population std 2
        let batch = Tensor::new(vec![4, 1], vec![1.0, 5.0, 1.0, 5.0]).unwrap();
        pn.initialize(&mut store, &batch).unwrap();
        assert_eq!(store.get(pn.scale).data(), &[0.5]);
        assert_eq!(store.get(pn.bias).data(), &[-1.5]);
    }

    #[test]
    fn init_errors() {
        let mut store = ParamStore::new();
        let mut pn = PatternNorm::new(&mut store, "pn", 2);
        let constant = Tensor::new(vec![3, 2], vec![1.0, 0.0, 1.0, 1.0, 1.0, 2.0]).unwrap();
        assert!(matches!(
            pn.initialize(&mut store, &constant),
            Err(Error::DegenerateChannel { channel: 0, .. })
        ));
        let single = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(pn.initialize(&mut store, &single), Err(Error::Contract(_))));
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::zeros(&[1, 2])).unwrap();
        assert!(matches!(pn.forward(&mut tape, x), Err(Error::Contract(_))));
    }
}
