//! Small dense linear algebra: LU with partial pivoting, determinants,
//! inverses and random rotations.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{NumError, Result};
use crate::tensor::Tensor;

/// Packed LU factorisation `P·A = L·U` (unit lower `L`).
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    pub fn new(a: &Tensor) -> Result<Self> {
        let (n, m) = a.dims2()?;
        if n != m {
            return Err(NumError::Rank {
                op: "lu",
                expected: "a square matrix",
                shape: a.shape().to_vec(),
            });
        }
        let mut lu = a.data().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|i| (i, lu[i * n + k].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pmax == 0.0 {
                return Err(NumError::Singular { pivot: k });
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] / pivot;
                lu[i * n + k] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        lu[i * n + j] -= f * lu[k * n + j];
                    }
                }
            }
        }
        Ok(Self { n, lu, perm, sign })
    }

    pub fn log_abs_det(&self) -> f64 {
        (0..self.n).map(|i| self.lu[i * self.n + i].abs().ln()).sum()
    }

    pub fn det(&self) -> f64 {
        self.sign * (0..self.n).map(|i| self.lu[i * self.n + i]).product::<f64>()
    }

    /// Solves `A·x = b` for one right-hand side.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let s: f64 = (0..i).map(|j| self.lu[i * n + j] * x[j]).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| self.lu[i * n + j] * x[j]).sum();
            x[i] = (x[i] - s) / self.lu[i * n + i];
        }
        x
    }

    pub fn inverse(&self) -> Tensor {
        let n = self.n;
        let mut inv = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            for (i, v) in self.solve(&e).into_iter().enumerate() {
                inv[i * n + j] = v;
            }
        }
        Tensor::from_parts(vec![n, n], inv)
    }
}

pub fn log_abs_det(a: &Tensor) -> Result<f64> {
    Ok(Lu::new(a)?.log_abs_det())
}

pub fn det(a: &Tensor) -> Result<f64> {
    Ok(Lu::new(a)?.det())
}

pub fn inverse(a: &Tensor) -> Result<Tensor> {
    Ok(Lu::new(a)?.inverse())
}

/// A uniformly random `n×n` rotation (orthogonal, `det = +1`): the `Q`
/// factor of a standard-normal draw, with `R`'s diagonal made positive and
/// the first column flipped if needed.
pub fn random_rotation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
    let draw: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
    // columns of the draw, orthonormalized by modified Gram-Schmidt run twice
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| draw[i * n + j]).collect()).collect();
    for j in 0..n {
        for _pass in 0..2 {
            for k in 0..j {
                let dot: f64 = cols[j].iter().zip(&cols[k]).map(|(a, b)| a * b).sum();
                let (head, tail) = cols.split_at_mut(j);
                for (v, q) in tail[0].iter_mut().zip(&head[k]) {
                    *v -= dot * q;
                }
            }
        }
        let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        cols[j].iter_mut().for_each(|v| *v /= norm);
    }
    let mut q = Tensor::from_fn(&[n, n], |idx| cols[idx % n][idx / n]);
    if det(&q).map_or(false, |d| d < 0.0) {
        for i in 0..n {
            q.data_mut()[i * n] *= -1.0;
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn det_of_scaled_identity() {
        let a = Tensor::eye(3).map(|v| 2.0 * v);
        assert!((log_abs_det(&a).unwrap() - 3.0 * 2f64.ln()).abs() < 1e-15);
        assert!((det(&a).unwrap() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn pivoting_handles_zero_leading_entry() {
        let a = Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap();
        assert_eq!(det(&a).unwrap(), -1.0);
        let inv = inverse(&a).unwrap();
        assert_eq!(inv, a);
    }

    #[test]
    fn singular_matrix_is_reported() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]).unwrap();
        assert!(matches!(Lu::new(&a), Err(NumError::Singular { .. })));
    }

    #[test]
    fn inverse_round_trip() {
        let a = Tensor::from_rows(&[&[4.0, 1.0, 0.5], &[1.0, 3.0, -1.0], &[0.2, 0.0, 2.0]]).unwrap();
        let prod = a.matmul(&inverse(&a).unwrap()).unwrap();
        assert!(prod.max_abs_diff(&Tensor::eye(3)) < 1e-13);
    }

    #[test]
    fn rotation_is_orthogonal_with_unit_det() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1, 2, 5, 32] {
            let q = random_rotation(n, &mut rng);
            let qtq = q.transpose().unwrap().matmul(&q).unwrap();
            assert!(qtq.max_abs_diff(&Tensor::eye(n)) < 1e-12);
            assert!((det(&q).unwrap() - 1.0).abs() < 1e-10);
        }
    }
}
