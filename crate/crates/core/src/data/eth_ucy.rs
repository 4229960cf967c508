//! Plain-text `frame ped_id x y` trajectory files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{Point, SceneWindow};
use crate::error::{io_err, Error, Result};

/// Frame spacing used when writing windows back to text.
pub const WRITE_FRAME_STEP: i64 = 10;

/// One pedestrian's observations, frames strictly ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTrack {
    pub ped_id: i64,
    pub frames: Vec<i64>,
    pub positions: Vec<Point>,
}

impl RawTrack {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

pub fn load_eth_ucy(path: impl AsRef<Path>) -> Result<Vec<RawTrack>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_eth_ucy(&text, &path.display().to_string())
}

fn integral(field: &str) -> Option<i64> {
    if let Ok(v) = field.parse::<i64>() {
        return Some(v);
    }
    let v: f64 = field.parse().ok()?;
    (v.is_finite() && v.fract() == 0.0 && v.abs() < 9.0e15).then_some(v as i64)
}

/// Parses whitespace-separated rows; blank lines are skipped. Frame and
/// pedestrian ids may be written as integral floats (`780.0`). Tracks come
/// back ordered by pedestrian id.
pub fn parse_eth_ucy(text: &str, source: &str) -> Result<Vec<RawTrack>> {
    let mut by_ped: BTreeMap<i64, BTreeMap<i64, Point>> = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let err = |message: String| Error::Parse {
            path: source.to_string(),
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields `frame ped_id x y`, found {}", fields.len())));
        }
        let frame = integral(fields[0]).ok_or_else(|| err(format!("bad frame index `{}`", fields[0])))?;
        let ped = integral(fields[1]).ok_or_else(|| err(format!("bad pedestrian id `{}`", fields[1])))?;
        let coord = |s: &str| -> Result<f64> {
            match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(err(format!("bad coordinate `{s}`"))),
            }
        };
        let p = [coord(fields[2])?, coord(fields[3])?];
        if by_ped.entry(ped).or_default().insert(frame, p).is_some() {
            return Err(err(format!("pedestrian {ped} appears twice in frame {frame}")));
        }
    }
    Ok(by_ped
        .into_iter()
        .map(|(ped_id, rows)| {
            let (frames, positions) = rows.into_iter().unzip();
            RawTrack {
                ped_id,
                frames,
                positions,
            }
        })
        .collect())
}

/// Writes windows in world coordinates, one block of frames per window with
/// fresh pedestrian ids, blocks separated by an empty frame so no window
/// leaks into the next on reload.
pub fn write_eth_ucy(windows: &[SceneWindow]) -> String {
    let mut out = String::new();
    let mut frame0 = 0i64;
    let mut next_id = 1i64;
    for w in windows {
        let obs = w.world_obs();
        let fut = w.world_fut();
        let steps = w.t_o() + w.t_p();
        for t in 0..steps {
            let frame = frame0 + t as i64 * WRITE_FRAME_STEP;
            for i in 0..w.n() {
                let p = if t < w.t_o() { obs[i][t] } else { fut[i][t - w.t_o()] };
                let _ = writeln!(out, "{frame} {} {} {}", next_id + i as i64, p[0], p[1]);
            }
        }
        next_id += w.n() as i64;
        frame0 += (steps as i64 + 1) * WRITE_FRAME_STEP;
    }
    out
}
