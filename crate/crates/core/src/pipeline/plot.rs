//! Sampled trajectories as CSV (`ped_id,k,t,x,y`) and a static SVG overlay.

use std::fmt::Write as _;

use super::evaluate::Predictor;
use super::stream_rng;
use crate::data::{Point, SceneWindow};
use crate::error::{Error, Result};

/// First RNG stream used for plotting; pedestrian `i` draws from
/// `PLOT_STREAM + i`.
pub const PLOT_STREAM: u64 = 1 << 56;

const CANVAS: f64 = 800.0;
const MARGIN: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleRow {
    pub ped_id: i64,
    pub k: usize,
    pub t: usize,
    pub x: f64,
    pub y: f64,
}

/// `k` sampled futures for every pedestrian of the scene, in world
/// coordinates: `n·k·t_p` rows.
pub fn plot_scene<P: Predictor + ?Sized>(
    predictor: &P,
    scene: &SceneWindow,
    k: usize,
    sigma: f64,
    seed: u64,
) -> Result<Vec<SampleRow>> {
    let mut rows = Vec::with_capacity(scene.n() * k * scene.t_p());
    for i in 0..scene.n() {
        let view = scene.retarget(i)?;
        let mut rng = stream_rng(seed, PLOT_STREAM + i as u64);
        for (s, path) in predictor.predict(&view, k, sigma, &mut rng)?.iter().enumerate() {
            for (t, p) in view.denormalize(path).into_iter().enumerate() {
                rows.push(SampleRow {
                    ped_id: scene.ped_ids[i],
                    k: s,
                    t,
                    x: p[0],
                    y: p[1],
                });
            }
        }
    }
    Ok(rows)
}

/// Distinct scenes of the datasets: the windows whose target is the first
/// pedestrian, one per window start.
pub fn list_scenes(datasets: &[(String, Vec<SceneWindow>)]) -> Vec<(String, &SceneWindow)> {
    datasets
        .iter()
        .flat_map(|(name, windows)| {
            windows
                .iter()
                .filter(|w| w.target == 0)
                .enumerate()
                .map(move |(i, w)| (format!("{name}:{i}"), w))
        })
        .collect()
}

/// Resolves `dataset:index`, or a bare index into all datasets in order.
pub fn find_scene<'a>(datasets: &'a [(String, Vec<SceneWindow>)], id: &str) -> Result<&'a SceneWindow> {
    let scenes = list_scenes(datasets);
    let hit = match id.parse::<usize>() {
        Ok(i) => scenes.get(i).map(|(_, w)| *w),
        Err(_) => scenes.iter().find(|(name, _)| name == id).map(|(_, w)| *w),
    };
    hit.ok_or_else(|| Error::Lookup(format!("no scene `{id}` among {} scenes", scenes.len())))
}

/// Shortest round-trip float formatting keeps CSV re-renders exact.
pub fn samples_to_csv(rows: &[SampleRow]) -> String {
    let mut out = String::from("ped_id,k,t,x,y\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.ped_id, r.k, r.t, r.x, r.y);
    }
    out
}

pub fn samples_from_csv(text: &str) -> Result<Vec<SampleRow>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: "samples.csv".into(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "ped_id,k,t,x,y" => {}
        _ => return Err(parse_err(1, "missing `ped_id,k,t,x,y` header".into())),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            if f.len() != 5 {
                return Err(parse_err(i + 1, format!("expected 5 fields, found {}", f.len())));
            }
            let bad = |what: &str| parse_err(i + 1, format!("bad {what}"));
            Ok(SampleRow {
                ped_id: f[0].parse().map_err(|_| bad("ped_id"))?,
                k: f[1].parse().map_err(|_| bad("k"))?,
                t: f[2].parse().map_err(|_| bad("t"))?,
                x: f[3].parse().map_err(|_| bad("x"))?,
                y: f[4].parse().map_err(|_| bad("y"))?,
            })
        })
        .collect()
}

struct Frame {
    min: Point,
    scale: f64,
    height: f64,
}

impl Frame {
    fn fit<'a>(points: impl Iterator<Item = &'a Point>) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in points {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        if !lo[0].is_finite() {
            lo = [0.0, 0.0];
            hi = [1.0, 1.0];
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-6);
        let scale = (CANVAS - 2.0 * MARGIN) / span;
        Self {
            min: lo,
            scale,
            height: hi[1] - lo[1],
        }
    }

    /// Canvas coordinates with y pointing up.
    fn map(&self, p: Point) -> (f64, f64) {
        let x = MARGIN + (p[0] - self.min[0]) * self.scale;
        let y = MARGIN + (self.height - (p[1] - self.min[1])) * self.scale;
        (x, y)
    }

    fn path(&self, pts: &[Point]) -> String {
        let mut d = String::new();
        for (i, &p) in pts.iter().enumerate() {
            let (x, y) = self.map(p);
            let _ = write!(d, "{}{x:.3},{y:.3}", if i == 0 { "M" } else { " L" });
        }
        d
    }
}

/// Observed tracks (solid black), ground-truth futures (dashed green) and
/// sampled futures (thin translucent blue). Each future starts at the
/// pedestrian's last observed position.
pub fn render_svg(scene: &SceneWindow, rows: &[SampleRow]) -> String {
    let obs = scene.world_obs();
    let fut = scene.world_fut();
    let mut samples: Vec<(i64, usize, Vec<(usize, Point)>)> = Vec::new();
    for r in rows {
        match samples.iter_mut().find(|(p, k, _)| *p == r.ped_id && *k == r.k) {
            Some((_, _, pts)) => pts.push((r.t, [r.x, r.y])),
            None => samples.push((r.ped_id, r.k, vec![(r.t, [r.x, r.y])])),
        }
    }
    for (_, _, pts) in &mut samples {
        pts.sort_by_key(|(t, _)| *t);
    }
    let frame = Frame::fit(
        obs.iter()
            .flatten()
            .chain(fut.iter().flatten())
            .chain(samples.iter().flat_map(|(_, _, p)| p.iter().map(|(_, q)| q))),
    );
    let anchor = |ped: i64| scene.ped_ids.iter().position(|&p| p == ped).map(|i| *obs[i].last().expect("observed"));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{CANVAS}\" height=\"{CANVAS}\" viewBox=\"0 0 {CANVAS} {CANVAS}\">"
    );
    let _ = writeln!(svg, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(svg, "<g class=\"predicted\" fill=\"none\" stroke=\"#1f6fd1\" stroke-width=\"1\" stroke-opacity=\"0.45\">");
    for (ped, k, pts) in &samples {
        let mut line: Vec<Point> = anchor(*ped).into_iter().collect();
        line.extend(pts.iter().map(|(_, p)| *p));
        let _ = writeln!(svg, "<path data-ped=\"{ped}\" data-k=\"{k}\" d=\"{}\"/>", frame.path(&line));
    }
    let _ = writeln!(svg, "</g>");
    let _ = writeln!(svg, "<g class=\"ground-truth\" fill=\"none\" stroke=\"#2a9d3a\" stroke-width=\"2\" stroke-dasharray=\"6 4\">");
    for (i, f) in fut.iter().enumerate() {
        let mut line = vec![*obs[i].last().expect("observed")];
        line.extend_from_slice(f);
        let _ = writeln!(svg, "<path data-ped=\"{}\" d=\"{}\"/>", scene.ped_ids[i], frame.path(&line));
    }
    let _ = writeln!(svg, "</g>");
    let _ = writeln!(svg, "<g class=\"observed\" fill=\"none\" stroke=\"black\" stroke-width=\"2.5\">");
    for (i, o) in obs.iter().enumerate() {
        let _ = writeln!(svg, "<path data-ped=\"{}\" d=\"{}\"/>", scene.ped_ids[i], frame.path(o));
    }
    let _ = writeln!(svg, "</g>");
    svg.push_str("</svg>\n");
    svg
}
