//! Trajectory data: ETH/UCY-format ingestion, windowing, normalization and
//! synthetic scenes.

mod eth_ucy;
mod synth;
mod window;

pub use eth_ucy::{load_eth_ucy, parse_eth_ucy, write_eth_ucy, RawTrack};
pub use synth::{parse_synth_list, synth_scenes, ScenarioKind, SynthSpec};
pub use window::{leave_one_out_split, window_scenes};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2-D position in meters.
pub type Point = [f64; 2];

pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1]]
}

pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// One instance: every pedestrian present for the whole window, with one of
/// them singled out as the prediction target.
///
/// Positions are stored translated so the target's last observed position is
/// the origin; `origin` holds that translation in world coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneWindow {
    pub ped_ids: Vec<i64>,
    /// `N × t_o` observed positions.
    pub obs: Vec<Vec<Point>>,
    /// `N × t_p` future positions.
    pub fut: Vec<Vec<Point>>,
    pub target: usize,
    pub origin: Point,
    /// Frame index of the first observed step (informational).
    pub start_frame: i64,
    /// Frame spacing between consecutive steps (informational).
    pub frame_step: i64,
}

impl SceneWindow {
    /// Builds a window from world-frame trajectories and normalizes it on
    /// `target`.
    pub fn from_world(
        ped_ids: Vec<i64>,
        obs: Vec<Vec<Point>>,
        fut: Vec<Vec<Point>>,
        target: usize,
        start_frame: i64,
        frame_step: i64,
    ) -> Result<Self> {
        let n = ped_ids.len();
        if n == 0 || obs.len() != n || fut.len() != n || target >= n {
            return Err(Error::Data(format!(
                "window needs matching ids/obs/fut and a valid target (n={n}, target={target})"
            )));
        }
        let t_o = obs[0].len();
        let t_p = fut[0].len();
        if t_o == 0 || t_p == 0 || obs.iter().any(|o| o.len() != t_o) || fut.iter().any(|f| f.len() != t_p) {
            return Err(Error::Data("ragged or empty trajectories in window".into()));
        }
        if obs.iter().chain(&fut).flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite position in window".into()));
        }
        let origin = obs[target][t_o - 1];
        let shift = |tracks: Vec<Vec<Point>>| -> Vec<Vec<Point>> {
            tracks
                .into_iter()
                .map(|t| t.into_iter().map(|p| sub(p, origin)).collect())
                .collect()
        };
        Ok(Self {
            ped_ids,
            obs: shift(obs),
            fut: shift(fut),
            target,
            origin,
            start_frame,
            frame_step,
        })
    }

    pub fn n(&self) -> usize {
        self.ped_ids.len()
    }

    pub fn t_o(&self) -> usize {
        self.obs[0].len()
    }

    pub fn t_p(&self) -> usize {
        self.fut[0].len()
    }

    pub fn to_world(&self, p: Point) -> Point {
        add(p, self.origin)
    }

    pub fn denormalize(&self, traj: &[Point]) -> Vec<Point> {
        traj.iter().map(|&p| self.to_world(p)).collect()
    }

    pub fn world_obs(&self) -> Vec<Vec<Point>> {
        self.obs.iter().map(|t| self.denormalize(t)).collect()
    }

    pub fn world_fut(&self) -> Vec<Vec<Point>> {
        self.fut.iter().map(|t| self.denormalize(t)).collect()
    }

    /// The same scene re-normalized on another pedestrian.
    pub fn retarget(&self, target: usize) -> Result<Self> {
        Self::from_world(
            self.ped_ids.clone(),
            self.world_obs(),
            self.world_fut(),
            target,
            self.start_frame,
            self.frame_step,
        )
    }

    /// Target trajectory, observed then future.
    pub fn target_full(&self) -> Vec<Point> {
        self.obs[self.target].iter().chain(&self.fut[self.target]).copied().collect()
    }

    pub fn target_future(&self) -> &[Point] {
        &self.fut[self.target]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SceneWindow {
        let obs = vec![vec![[1.0, 1.0], [2.0, 1.5]], vec![[0.0, 3.0], [0.5, 3.0]]];
        let fut = vec![vec![[3.0, 2.0]], vec![[1.0, 3.0]]];
        SceneWindow::from_world(vec![4, 9], obs, fut, 1, 0, 1).unwrap()
    }

    #[test]
    fn target_last_observation_is_origin() {
        let w = sample();
        assert_eq!(w.obs[w.target][w.t_o() - 1], [0.0, 0.0]);
        assert_eq!(w.origin, [0.5, 3.0]);
    }

    #[test]
    fn denormalize_restores_world_frame() {
        let w = sample();
        assert_eq!(w.world_obs()[0], vec![[1.0, 1.0], [2.0, 1.5]]);
        assert_eq!(w.world_fut()[1], vec![[1.0, 3.0]]);
        let r = w.retarget(0).unwrap();
        assert_eq!(r.world_fut(), w.world_fut());
        assert_eq!(r.obs[0][1], [0.0, 0.0]);
    }

    #[test]
    fn rejects_non_finite_positions() {
        let obs = vec![vec![[f64::NAN, 0.0]]];
        let fut = vec![vec![[0.0, 0.0]]];
        assert!(matches!(
            SceneWindow::from_world(vec![1], obs, fut, 0, 0, 1),
            Err(Error::Data(_))
        ));
    }
}
