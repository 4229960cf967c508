//! Displacement metrics and best-of-K evaluation reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{dist, Point};
use crate::error::{Error, Result};

fn check_pair(pred: &[Point], gt: &[Point]) -> Result<()> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::Contract(format!(
            "prediction has {} steps, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Mean per-step Euclidean distance.
pub fn ade(pred: &[Point], gt: &[Point]) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(&p, &g)| dist(p, g)).sum::<f64>() / gt.len() as f64)
}

/// Euclidean distance at the final step.
pub fn fde(pred: &[Point], gt: &[Point]) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(dist(pred[pred.len() - 1], gt[gt.len() - 1]))
}

/// `(min_k ADE, min_k FDE)`, the two minima taken independently.
pub fn best_of_k(preds: &[Vec<Point>], gt: &[Point]) -> Result<(f64, f64)> {
    if preds.is_empty() {
        return Err(Error::Contract("best-of-K needs at least one prediction".into()));
    }
    let mut best = (f64::INFINITY, f64::INFINITY);
    for p in preds {
        best.0 = best.0.min(ade(p, gt)?);
        best.1 = best.1.min(fde(p, gt)?);
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub dataset: String,
    pub ade: f64,
    pub fde: f64,
    pub n_instances: usize,
}

/// Per-dataset best-of-K metrics; the aggregate is the unweighted mean of
/// the per-dataset values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub datasets: Vec<DatasetMetrics>,
}

impl EvalReport {
    pub fn new(k: usize) -> Self {
        Self { k, datasets: Vec::new() }
    }

    /// Adds a dataset from its per-instance `(ade, fde)` pairs.
    pub fn push(&mut self, dataset: impl Into<String>, instances: &[(f64, f64)]) {
        let n = instances.len();
        let mean = |f: fn(&(f64, f64)) -> f64| {
            if n == 0 {
                f64::NAN
            } else {
                instances.iter().map(f).sum::<f64>() / n as f64
            }
        };
        self.datasets.push(DatasetMetrics {
            dataset: dataset.into(),
            ade: mean(|p| p.0),
            fde: mean(|p| p.1),
            n_instances: n,
        });
    }

    /// `(ade, fde, total instances)` averaged over datasets.
    pub fn average(&self) -> Option<(f64, f64, usize)> {
        if self.datasets.is_empty() {
            return None;
        }
        let n = self.datasets.len() as f64;
        Some((
            self.datasets.iter().map(|d| d.ade).sum::<f64>() / n,
            self.datasets.iter().map(|d| d.fde).sum::<f64>() / n,
            self.datasets.iter().map(|d| d.n_instances).sum(),
        ))
    }

    /// `dataset,K,ade,fde,n_instances` rows followed by an `AVG` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,K,ade,fde,n_instances\n");
        for d in &self.datasets {
            let _ = writeln!(out, "{},{},{},{},{}", d.dataset, self.k, d.ade, d.fde, d.n_instances);
        }
        if let Some((a, f, n)) = self.average() {
            let _ = writeln!(out, "AVG,{},{a},{f},{n}", self.k);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchors() {
        let gt = [[0.0, 0.0], [1.0, 1.0], [2.0, 0.5]];
        assert_eq!(ade(&gt, &gt).unwrap(), 0.0);
        assert_eq!(fde(&gt, &gt).unwrap(), 0.0);
        let shifted: Vec<Point> = gt.iter().map(|p| [p[0] + 1.0, p[1]]).collect();
        assert_eq!(ade(&shifted, &gt).unwrap(), 1.0);
        let mut last = gt.to_vec();
        last[2][1] += 2.0;
        assert_eq!(fde(&last, &gt).unwrap(), 2.0);
        assert!(matches!(ade(&gt[..2], &gt), Err(Error::Contract(_))));
        assert!(matches!(best_of_k(&[], &gt), Err(Error::Contract(_))));
    }

    #[test]
    fn minima_are_independent() {
        let gt = [[0.0, 0.0], [0.0, 0.0]];
        // close on average, far at the end
        let a = vec![[0.0, 0.0], [1.0, 0.0]];
        // far on average, exact at the end
        let b = vec![[3.0, 0.0], [0.0, 0.0]];
        let (ade_best, fde_best) = best_of_k(&[a, b], &gt).unwrap();
        assert_eq!(ade_best, 0.5);
        assert_eq!(fde_best, 0.0);
    }

    #[test]
    fn csv_has_average_row() {
        let mut r = EvalReport::new(20);
        r.push("eth", &[(1.0, 2.0), (3.0, 4.0)]);
        r.push("hotel", &[(0.5, 1.0)]);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "dataset,K,ade,fde,n_instances");
        assert_eq!(lines[1], "eth,20,2,3,2");
        assert_eq!(lines[3], "AVG,20,1.25,2,3");
    }
}
