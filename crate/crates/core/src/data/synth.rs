//! Analytic synthetic scenes with Gaussian position noise.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Point, SceneWindow};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// One walker at constant velocity.
    Straight,
    /// One walker at constant speed and constant turn rate.
    Turn,
    /// Two walkers on intersecting lines, meeting near the same time.
    CrossingPair,
    /// Three walkers side by side with a shared velocity.
    GroupParallel,
    /// One walker that halts for a few steps and resumes.
    StopAndGo,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 5] = [
        ScenarioKind::Straight,
        ScenarioKind::Turn,
        ScenarioKind::CrossingPair,
        ScenarioKind::GroupParallel,
        ScenarioKind::StopAndGo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Straight => "straight",
            ScenarioKind::Turn => "turn",
            ScenarioKind::CrossingPair => "crossing_pair",
            ScenarioKind::GroupParallel => "group_parallel",
            ScenarioKind::StopAndGo => "stop_and_go",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario kind `{s}`")))
    }
}

/// What to generate: scene counts per kind, seed, noise and geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub kinds: Vec<(ScenarioKind, usize)>,
    pub seed: u64,
    /// Standard deviation of the per-coordinate position noise, meters.
    pub noise: f64,
    pub t_o: usize,
    pub t_p: usize,
    /// Walking speed range, meters per step.
    pub speed_min: f64,
    pub speed_max: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            kinds: vec![(ScenarioKind::Straight, 32), (ScenarioKind::Turn, 32)],
            seed: 0,
            noise: 0.02,
            t_o: 8,
            t_p: 12,
            speed_min: 0.3,
            speed_max: 0.7,
        }
    }
}

impl SynthSpec {
    pub fn total(&self) -> usize {
        self.kinds.iter().map(|(_, n)| n).sum()
    }
}

/// Parses `synth:straight=32,turn=32;seed=7;noise=0.02` (the `synth:` prefix
/// is optional; `t_o`, `t_p`, `speed_min`, `speed_max` are also accepted).
/// Unset fields keep their defaults.
pub fn parse_synth_list(text: &str) -> Result<SynthSpec> {
    let body = text.strip_prefix("synth:").unwrap_or(text);
    let mut spec = SynthSpec {
        kinds: Vec::new(),
        ..SynthSpec::default()
    };
    let bad = |what: &str| Error::Config(format!("bad synthetic spec `{text}`: {what}"));
    for (i, part) in body.split(';').map(str::trim).filter(|p| !p.is_empty()).enumerate() {
        let entries: Vec<(&str, &str)> = part
            .split(',')
            .map(|kv| kv.split_once('=').map(|(k, v)| (k.trim(), v.trim())))
            .collect::<Option<_>>()
            .ok_or_else(|| bad("expected key=value"))?;
        if i == 0 {
            if entries[0].0.parse::<ScenarioKind>().is_ok() {
                for (k, v) in entries {
                    let n = v.parse().map_err(|_| bad(&format!("count `{v}`")))?;
                    spec.kinds.push((k.parse()?, n));
                }
                continue;
            }
        }
        for (k, v) in entries {
            let num = || -> Result<f64> { v.parse().map_err(|_| bad(&format!("value `{v}` for `{k}`"))) };
            match k {
                "seed" => spec.seed = v.parse().map_err(|_| bad(&format!("seed `{v}`")))?,
                "noise" => spec.noise = num()?,
                "t_o" => spec.t_o = num()? as usize,
                "t_p" => spec.t_p = num()? as usize,
                "speed_min" => spec.speed_min = num()?,
                "speed_max" => spec.speed_max = num()?,
                _ => return Err(bad(&format!("unknown key `{k}`"))),
            }
        }
    }
    if spec.kinds.is_empty() {
        return Err(bad("no scenario counts"));
    }
    Ok(spec)
}

fn velocity(speed: f64, heading: f64) -> Point {
    [speed * heading.cos(), speed * heading.sin()]
}

fn line(start: Point, vel: Point, steps: usize, t0: f64) -> Vec<Point> {
    (0..steps)
        .map(|t| {
            let s = t as f64 - t0;
            [start[0] + s * vel[0], start[1] + s * vel[1]]
        })
        .collect()
}

fn generate(kind: ScenarioKind, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<Point>> {
    let steps = spec.t_o + spec.t_p;
    let speed = if spec.speed_max > spec.speed_min {
        rng.random_range(spec.speed_min..spec.speed_max)
    } else {
        spec.speed_min
    };
    let heading = rng.random_range(0.0..2.0 * PI);
    let start = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
    match kind {
        ScenarioKind::Straight => vec![line(start, velocity(speed, heading), steps, 0.0)],
        ScenarioKind::Turn => {
            let rate = rng.random_range(0.05..0.2) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let mut p = start;
            let mut path = Vec::with_capacity(steps);
            for t in 0..steps {
                path.push(p);
                let v = velocity(speed, heading + rate * t as f64);
                p = [p[0] + v[0], p[1] + v[1]];
            }
            vec![path]
        }
        ScenarioKind::CrossingPair => {
            let meet_step = rng.random_range(spec.t_o as f64..(steps - 1).max(spec.t_o) as f64 + 0.5);
            let cross = heading + rng.random_range(PI / 3.0..2.0 * PI / 3.0);
            let other_speed = if spec.speed_max > spec.speed_min {
                rng.random_range(spec.speed_min..spec.speed_max)
            } else {
                spec.speed_min
            };
            let lag = rng.random_range(-0.5..0.5);
            vec![
                line(start, velocity(speed, heading), steps, meet_step),
                line(start, velocity(other_speed, cross), steps, meet_step + lag),
            ]
        }
        ScenarioKind::GroupParallel => {
            let vel = velocity(speed, heading);
            let side = [-heading.sin(), heading.cos()];
            let gap = rng.random_range(0.6..0.9);
            (0..3)
                .map(|i| {
                    let off = (i as f64 - 1.0) * gap;
                    line([start[0] + off * side[0], start[1] + off * side[1]], vel, steps, 0.0)
                })
                .collect()
        }
        ScenarioKind::StopAndGo => {
            let vel = velocity(speed, heading);
            let stop_at = rng.random_range(2..steps.saturating_sub(3).max(3));
            let pause = rng.random_range(2..=5usize);
            let mut p = start;
            let mut path = Vec::with_capacity(steps);
            for t in 0..steps {
                path.push(p);
                if !(stop_at..stop_at + pause).contains(&t) {
                    p = [p[0] + vel[0], p[1] + vel[1]];
                }
            }
            vec![path]
        }
    }
}

/// Scenes in spec order; scene `i` draws from its own stream of the seeded
/// generator, so adding scenes never changes earlier ones. Target is always
/// pedestrian 0.
pub fn synth_scenes(spec: &SynthSpec) -> Result<Vec<SceneWindow>> {
    if spec.t_o == 0 || spec.t_p == 0 {
        return Err(Error::Config("synthetic windows need t_o, t_p >= 1".into()));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::Config(format!("noise must be a nonnegative number, got {}", spec.noise)));
    }
    if !(spec.speed_min >= 0.0 && spec.speed_max >= spec.speed_min && spec.speed_max.is_finite()) {
        return Err(Error::Config("speed range must satisfy 0 <= speed_min <= speed_max".into()));
    }
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(spec.total());
    let mut index = 0u64;
    for &(kind, count) in &spec.kinds {
        for _ in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(index);
            let mut paths = generate(kind, spec, &mut rng);
            if spec.noise > 0.0 {
                for p in paths.iter_mut().flatten().flatten() {
                    *p += noise.sample(&mut rng);
                }
            }
            let ids = (0..paths.len() as i64).collect();
            let obs = paths.iter().map(|p| p[..spec.t_o].to_vec()).collect();
            let fut = paths.iter().map(|p| p[spec.t_o..].to_vec()).collect();
            out.push(SceneWindow::from_world(ids, obs, fut, 0, 0, 10)?);
            index += 1;
        }
    }
    Ok(out)
}
