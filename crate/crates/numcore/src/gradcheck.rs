//! Central finite differences, used as an oracle for the tape.

use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function.
pub fn numerical_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central-difference Jacobian of a vector function; row `i` holds
/// `d out_i / d x`.
pub fn numerical_jacobian(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Vec<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut columns = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        let orig = probe[j];
        probe[j] = orig + h;
        let up = f(&probe);
        probe[j] = orig - h;
        let down = f(&probe);
        probe[j] = orig;
        columns.push(up.iter().zip(&down).map(|(u, d)| (u - d) / (2.0 * h)).collect::<Vec<_>>());
    }
    let rows = columns.first().map_or(0, Vec::len);
    (0..rows).map(|i| columns.iter().map(|c| c[i]).collect()).collect()
}

/// `|a - n| <= max(rel * max(|a|, |n|), abs_floor)`.
pub fn close(analytic: f64, numeric: f64, rel: f64, abs_floor: f64) -> bool {
    let err = (analytic - numeric).abs();
    err <= (rel * analytic.abs().max(numeric.abs())).max(abs_floor)
}
