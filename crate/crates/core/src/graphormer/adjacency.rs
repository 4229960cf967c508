//! Structural attention masks: causal temporal graph and field-of-view
//! spatial graph.

use std::rc::Rc;

use numcore::MASKED;

use crate::data::{sub, Point};
use crate::error::{Error, Result};

/// Norm below which a walking direction counts as stationary.
pub const STATIONARY_EPS: f64 = 1e-9;

fn keep_of(mask: &[f64]) -> Rc<[bool]> {
    mask.iter().map(|&v| v == 1.0).collect()
}

/// Causal graph over `T` time steps: step `i` may attend to step `j` iff
/// `i >= j`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalGraph {
    t: usize,
    mask: Vec<f64>,
}

pub fn build_temporal_adjacency(t: usize) -> Result<TemporalGraph> {
    if t == 0 {
        return Err(Error::EmptyWindow);
    }
    let mask = (0..t * t)
        .map(|k| if k / t >= k % t { 1.0 } else { MASKED })
        .collect();
    Ok(TemporalGraph { t, mask })
}

impl TemporalGraph {
    /// Fully connected graph, used when the causal mask is switched off.
    pub fn dense(t: usize) -> Result<Self> {
        if t == 0 {
            return Err(Error::EmptyWindow);
        }
        Ok(Self {
            t,
            mask: vec![1.0; t * t],
        })
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    /// Entry `(i, j)`, 0-indexed: `1.0` or [`MASKED`].
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.mask[i * self.t + j]
    }

    pub fn mask(&self) -> &[f64] {
        &self.mask
    }

    pub fn keep(&self) -> Rc<[bool]> {
        keep_of(&self.mask)
    }

    /// Number of steps attending to step `j` (column count of admissible
    /// entries). Under the causal mask this is `T - j` for 0-indexed `j`.
    pub fn degree(&self, j: usize) -> usize {
        (0..self.t).filter(|&i| self.get(i, j) == 1.0).count()
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.t).map(|j| self.degree(j)).collect()
    }
}

/// Field-of-view graph over the `N` pedestrians of one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGraph {
    n: usize,
    mask: Vec<f64>,
    walk_dirs: Vec<Point>,
    rel_pos: Vec<Point>,
}

/// `A[i][j] = 1` iff `x_{j→i}·Δvx_i >= 0` and `y_{j→i}·Δvy_i >= 0`, where
/// `(x_{j→i}, y_{j→i}) = p_j - p_i` and `Δv_i` is pedestrian `i`'s latest
/// displacement.
pub fn build_spatial_adjacency(prev: &[Point], now: &[Point]) -> Result<SpatialGraph> {
    let n = now.len();
    if n == 0 {
        return Err(Error::Contract("spatial graph needs at least one pedestrian".into()));
    }
    if prev.len() != n {
        return Err(Error::Contract(format!(
            "snapshots cover different pedestrian counts ({} vs {n})",
            prev.len()
        )));
    }
    let walk_dirs: Vec<Point> = now.iter().zip(prev).map(|(&a, &b)| sub(a, b)).collect();
    let mut mask = Vec::with_capacity(n * n);
    let mut rel_pos = Vec::with_capacity(n * n);
    for i in 0..n {
        let d = walk_dirs[i];
        for j in 0..n {
            let r = sub(now[j], now[i]);
            let visible = r[0] * d[0] >= 0.0 && r[1] * d[1] >= 0.0;
            mask.push(if visible { 1.0 } else { MASKED });
            rel_pos.push(r);
        }
    }
    Ok(SpatialGraph {
        n,
        mask,
        walk_dirs,
        rel_pos,
    })
}

impl SpatialGraph {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.mask[i * self.n + j]
    }

    pub fn mask(&self) -> &[f64] {
        &self.mask
    }

    pub fn keep(&self) -> Rc<[bool]> {
        keep_of(&self.mask)
    }

    pub fn walk_dirs(&self) -> &[Point] {
        &self.walk_dirs
    }

    /// `p_j - p_i` for the pair `(i, j)`.
    pub fn rel_pos(&self, i: usize, j: usize) -> Point {
        self.rel_pos[i * self.n + j]
    }
}

/// Cosine of the angle between two walking directions; 0 when either is
/// stationary.
pub fn steering_cosine(a: Point, b: Point) -> f64 {
    let na = a[0].hypot(a[1]);
    let nb = b[0].hypot(b[1]);
    if na < STATIONARY_EPS || nb < STATIONARY_EPS {
        return 0.0;
    }
    ((a[0] * b[0] + a[1] * b[1]) / (na * nb)).clamp(-1.0, 1.0)
}
