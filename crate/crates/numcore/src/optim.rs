//! Adam with decoupled weight decay.

use crate::error::{NumError, Result};
use crate::param::{Grads, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, betas: (f64, f64), weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// First and second moment buffers, one pair per parameter.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Rebuilds optimizer state, e.g. from a checkpoint.
    pub fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<()> {
        let shapes_match = |buf: &[Vec<f64>]| {
            buf.len() == self.m.len() && buf.iter().zip(&self.m).all(|(a, b)| a.len() == b.len())
        };
        if !shapes_match(&m) || !shapes_match(&v) {
            return Err(NumError::Contract("optimizer state does not match parameters".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update. Parameters without a gradient still receive weight decay
    /// and moment decay, matching a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(NumError::Contract(format!(
                "adam: {} parameters, {} gradient slots, {} moment slots",
                store.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let g = grads.get(id);
            let p = store.get_mut(id).data_mut();
            if let Some(g) = g {
                if g.len() != p.len() {
                    return Err(NumError::Contract(format!("adam: gradient length mismatch for slot {i}")));
                }
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                let gk = g.map_or(0.0, |g| g[k]);
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= self.lr * self.weight_decay * p[k];
                p[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
