//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `STGF`, `u32` version, config TOML,
//! epoch, training counters, sampling-RNG state, named parameter records
//! (name, shape, raw `f64` payload), Adam state, and a trailing SHA-256 of
//! everything before it.

use std::path::Path;

use numcore::{Adam, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::Config;
use crate::error::{io_err, Error, Result};
use crate::model::StGlow;

pub const MAGIC: &[u8; 4] = b"STGF";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    /// Completed epochs.
    pub epoch: u64,
    pub flow_initialized: bool,
    /// Best validation ADE so far (`inf` when none).
    pub best_val_ade: f64,
    /// Optimizer steps rejected for a singular flow weight.
    pub skipped_steps: u64,
    pub rng: RngState,
    pub params: Vec<ParamRecord>,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    pub fn capture(config: &Config, model: &StGlow, adam: &Adam, rng: &ChaCha8Rng, epoch: u64) -> Self {
        let params = model
            .store
            .iter()
            .map(|(_, name, t)| ParamRecord {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        let (m, v) = adam.moments();
        Self {
            config: config.clone(),
            epoch,
            flow_initialized: model.flow().is_initialized(),
            best_val_ade: f64::INFINITY,
            skipped_steps: 0,
            rng: RngState::capture(rng),
            params,
            optimizer: OptimizerState {
                step: adam.steps_taken(),
                m: m.to_vec(),
                v: v.to_vec(),
            },
        }
    }

    /// Copies every parameter into `store`, matching by name and shape.
    pub fn load_params(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for rec in &self.params {
            let id = store
                .find(&rec.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", rec.name)))?;
            let t = Tensor::new(rec.shape.clone(), rec.data.clone())?;
            store
                .set(id, t)
                .map_err(|_| Error::Checkpoint(format!("shape mismatch for `{}`", rec.name)))?;
        }
        Ok(())
    }

    /// Rebuilds the model described by the stored config with the stored
    /// parameters.
    pub fn model(&self) -> Result<StGlow> {
        let mut model = StGlow::new(&self.config.model, &mut ChaCha8Rng::seed_from_u64(0))?;
        self.load_params(&mut model.store)?;
        if self.flow_initialized {
            model.flow_mut().mark_initialized();
        }
        Ok(model)
    }

    pub fn optimizer(&self, store: &ParamStore) -> Result<Adam> {
        let t = &self.config.train;
        let mut adam = Adam::new(store, t.lr, t.betas, t.weight_decay);
        adam.restore(self.optimizer.step, self.optimizer.m.clone(), self.optimizer.v.clone())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(adam)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.bytes(self.config.to_toml()?.as_bytes());
        w.u64(self.epoch);
        w.0.push(self.flow_initialized as u8);
        w.f64(self.best_val_ade);
        w.u64(self.skipped_steps);
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.u64(self.params.len() as u64);
        for p in &self.params {
            w.bytes(p.name.as_bytes());
            w.u32(p.shape.len() as u32);
            for &d in &p.shape {
                w.u64(d as u64);
            }
            w.f64s(&p.data);
        }
        w.u64(self.optimizer.step);
        w.u64(self.optimizer.m.len() as u64);
        for (m, v) in self.optimizer.m.iter().zip(&self.optimizer.v) {
            w.f64s(m);
            w.f64s(v);
        }
        let digest = Sha256::digest(&w.0);
        w.0.extend_from_slice(&digest);
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch (file corrupted)".into()));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let toml = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config = Config::from_toml(&toml)?;
        let epoch = r.u64()?;
        let flow_initialized = r.take(1)?[0] != 0;
        let best_val_ade = r.f64()?;
        let skipped_steps = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let n = r.u64()? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = String::from_utf8(r.bytes()?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let data = r.f64s()?;
            if shape.iter().product::<usize>() != data.len() {
                return Err(Error::Checkpoint(format!("payload of `{name}` does not match its shape")));
            }
            params.push(ParamRecord { name, shape, data });
        }
        let step = r.u64()?;
        let slots = r.u64()? as usize;
        let mut m = Vec::with_capacity(slots.min(1 << 16));
        let mut v = Vec::with_capacity(slots.min(1 << 16));
        for _ in 0..slots {
            m.push(r.f64s()?);
            v.push(r.f64s()?);
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after optimizer state".into()));
        }
        Ok(Self {
            config,
            epoch,
            flow_initialized,
            best_val_ade,
            skipped_steps,
            rng: RngState { seed, stream, word_pos },
            params,
            optimizer: OptimizerState { step, m, v },
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn
    /// checkpoint behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }

    fn f64s(&mut self, vals: &[f64]) {
        self.u64(vals.len() as u64);
        for &v in vals {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (Config, StGlow, Adam, ChaCha8Rng) {
        let mut config = Config::toy();
        config.model.encoder.width = 8;
        config.model.encoder.heads = 2;
        config.model.flow.channels = 4;
        config.model.flow.coupling_hidden = 4;
        config.model.flow.steps = 2;
        config.model.decoder.hidden = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = StGlow::new(&config.model, &mut rng).unwrap();
        let adam = Adam::new(&model.store, 1e-3, (0.9, 0.999), 0.0);
        (config, model, adam, rng)
    }

    #[test]
    fn bytes_round_trip_bit_exactly() {
        let (config, model, adam, rng) = tiny();
        let ck = Checkpoint::capture(&config, &model, &adam, &rng, 3);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let rebuilt = back.model().unwrap();
        let a: Vec<u64> = model.flat_params().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = rebuilt.flat_params().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn rng_state_resumes_stream() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.set_stream(7);
        let _: u64 = rng.random();
        let state = RngState::capture(&rng);
        let expected: Vec<u32> = (0..5).map(|_| rng.random()).collect();
        let mut restored = state.restore();
        let got: Vec<u32> = (0..5).map(|_| restored.random()).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn corruption_is_detected() {
        let (config, model, adam, rng) = tiny();
        let mut bytes = Checkpoint::capture(&config, &model, &adam, &rng, 0).to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(b"NOPE0000"), Err(Error::Checkpoint(_))));
    }
}
