//! Sliding-window extraction and leave-one-out splits.

use std::collections::HashMap;

use super::{Point, RawTrack, SceneWindow};
use crate::error::{Error, Result};

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// Greatest common divisor of all within-track frame gaps (1 if no track
/// has two frames).
pub fn frame_step(tracks: &[RawTrack]) -> i64 {
    let g = tracks
        .iter()
        .flat_map(|t| t.frames.windows(2).map(|w| w[1] - w[0]))
        .fold(0, gcd);
    if g == 0 {
        1
    } else {
        g
    }
}

/// Emits one [`SceneWindow`] per (window, target) pair. Windows of
/// `t_o + t_p` consecutive steps start at the first frame and advance by
/// `stride` steps; only pedestrians present at every step of a window take
/// part in it.
pub fn window_scenes(tracks: &[RawTrack], t_o: usize, t_p: usize, stride: usize) -> Result<Vec<SceneWindow>> {
    if t_o == 0 || t_p == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "t_o, t_p and stride must be positive (got {t_o}, {t_p}, {stride})"
        )));
    }
    let (Some(first), Some(last)) = (
        tracks.iter().filter_map(|t| t.frames.first()).min(),
        tracks.iter().filter_map(|t| t.frames.last()).max(),
    ) else {
        return Ok(Vec::new());
    };
    let step = frame_step(tracks);
    let len = (t_o + t_p) as i64;
    let lookup: Vec<HashMap<i64, Point>> = tracks
        .iter()
        .map(|t| t.frames.iter().copied().zip(t.positions.iter().copied()).collect())
        .collect();

    let mut out = Vec::new();
    let mut start = *first;
    while start + (len - 1) * step <= *last {
        let end = start + (len - 1) * step;
        let mut ids = Vec::new();
        let mut obs = Vec::new();
        let mut fut = Vec::new();
        for (track, frames) in tracks.iter().zip(&lookup) {
            if track.frames.first().is_none_or(|&f| f > start) || track.frames.last().is_none_or(|&f| f < end) {
                continue;
            }
            let path: Option<Vec<Point>> = (0..len).map(|t| frames.get(&(start + t * step)).copied()).collect();
            if let Some(path) = path {
                ids.push(track.ped_id);
                obs.push(path[..t_o].to_vec());
                fut.push(path[t_o..].to_vec());
            }
        }
        for target in 0..ids.len() {
            out.push(SceneWindow::from_world(
                ids.clone(),
                obs.clone(),
                fut.clone(),
                target,
                start,
                step,
            )?);
        }
        start += stride as i64 * step;
    }
    Ok(out)
}

/// Holds out the named scene: returns (all other scenes' windows, the named
/// scene's windows).
pub fn leave_one_out_split(
    scene: &str,
    all: &[(String, Vec<SceneWindow>)],
) -> Result<(Vec<SceneWindow>, Vec<SceneWindow>)> {
    if !all.iter().any(|(name, _)| name == scene) {
        return Err(Error::Config(format!("unknown scene `{scene}`")));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (name, windows) in all {
        if name == scene {
            test.extend(windows.iter().cloned());
        } else {
            train.extend(windows.iter().cloned());
        }
    }
    Ok((train, test))
}
