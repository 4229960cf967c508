//! Best-of-K evaluation over datasets of scene windows.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::stream_rng;
use crate::data::{Point, SceneWindow};
use crate::error::Result;
use crate::metrics::{best_of_k, EvalReport};
use crate::model::StGlow;

/// First RNG stream used for evaluation; scene `i` of dataset `d` draws
/// from `EVAL_STREAM + (d << 32) + i`.
pub const EVAL_STREAM: u64 = 1 << 48;

/// Anything that proposes `k` futures for a scene's target in the scene's
/// normalized frame.
pub trait Predictor: Sync {
    fn predict(&self, scene: &SceneWindow, k: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<Point>>>;
}

impl Predictor for StGlow {
    fn predict(&self, scene: &SceneWindow, k: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<Point>>> {
        StGlow::predict(self, scene, k, sigma, rng)
    }
}

/// Returns the ground truth itself, `k` times.
#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, scene: &SceneWindow, k: usize, _sigma: f64, _rng: &mut ChaCha8Rng) -> Result<Vec<Vec<Point>>> {
        Ok(vec![scene.target_future().to_vec(); k])
    }
}

/// Continues the target's last observed displacement at constant velocity.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConstantVelocity;

impl Predictor for ConstantVelocity {
    fn predict(&self, scene: &SceneWindow, k: usize, _sigma: f64, _rng: &mut ChaCha8Rng) -> Result<Vec<Vec<Point>>> {
        let obs = &scene.obs[scene.target];
        let last = obs[obs.len() - 1];
        let v = if obs.len() >= 2 {
            let prev = obs[obs.len() - 2];
            [last[0] - prev[0], last[1] - prev[1]]
        } else {
            [0.0, 0.0]
        };
        let path: Vec<Point> = (1..=scene.t_p())
            .map(|s| [last[0] + s as f64 * v[0], last[1] + s as f64 * v[1]])
            .collect();
        Ok(vec![path; k])
    }
}

/// Per-instance best-of-K `(ade, fde)` in world coordinates, computed in
/// parallel with one RNG stream per scene.
pub fn evaluate_scenes<P: Predictor + ?Sized>(
    predictor: &P,
    scenes: &[SceneWindow],
    k: usize,
    sigma: f64,
    seed: u64,
    stream_base: u64,
) -> Result<Vec<(f64, f64)>> {
    scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| {
            let mut rng = stream_rng(seed, stream_base + i as u64);
            let preds = predictor.predict(scene, k, sigma, &mut rng)?;
            let preds: Vec<Vec<Point>> = preds.iter().map(|p| scene.denormalize(p)).collect();
            let gt = scene.denormalize(scene.target_future());
            best_of_k(&preds, &gt)
        })
        .collect()
}

/// Best-of-K report with one row per named dataset.
pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &P,
    datasets: &[(String, Vec<SceneWindow>)],
    k: usize,
    sigma: f64,
    seed: u64,
) -> Result<EvalReport> {
    let mut report = EvalReport::new(k);
    for (d, (name, scenes)) in datasets.iter().enumerate() {
        let per = evaluate_scenes(predictor, scenes, k, sigma, seed, EVAL_STREAM + ((d as u64) << 32))?;
        report.push(name.clone(), &per);
    }
    Ok(report)
}
