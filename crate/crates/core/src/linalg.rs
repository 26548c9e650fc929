//! Symmetric eigen-decomposition by cyclic Jacobi rotations.

use crate::autograd::AutogradError;

/// Convergence when the off-diagonal Frobenius norm drops below this
/// multiple of the trace magnitude.
pub const JACOBI_TOLERANCE: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigenpairs of a symmetric matrix, eigenvalues in descending order.
#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    /// Row-major `n×n`; column `i` is the unit eigenvector of `values[i]`.
    pub vectors: Vec<f64>,
    pub sweeps: usize,
}

impl SymmetricEigen {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn vector(&self, i: usize) -> Vec<f64> {
        let n = self.dim();
        (0..n).map(|r| self.vectors[r * n + i]).collect()
    }
}

fn off_diagonal_norm(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[i * n + j] * a[i * n + j];
            }
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi on a row-major symmetric `n×n` matrix.
///
/// Fails with [`AutogradError::NotSymmetric`] when `a` is visibly asymmetric and
/// with [`AutogradError::NoConvergence`] after [`JACOBI_MAX_SWEEPS`] sweeps.
pub fn symmetric_eigen(a: &[f64], n: usize) -> Result<SymmetricEigen, AutogradError> {
    assert_eq!(a.len(), n * n, "symmetric_eigen: buffer is not n×n");
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[i * n + j] - a[j * n + i]).abs() > 1e-10 * scale.max(f64::MIN_POSITIVE) {
                return Err(AutogradError::NotSymmetric {
                    op: "symmetric-eigenvalues",
                });
            }
        }
    }

    let mut m = a.to_vec();
    // Symmetrise exactly so rotations see a symmetric input.
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = avg;
            m[j * n + i] = avg;
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let trace_mag: f64 = (0..n).map(|i| m[i * n + i].abs()).sum();
    let threshold = JACOBI_TOLERANCE * trace_mag;
    let mut sweeps = 0;
    while off_diagonal_norm(&m, n) > threshold {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(AutogradError::NoConvergence { sweeps });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors[r * n + dst] = v[r * n + src];
        }
    }
    Ok(SymmetricEigen {
        values,
        vectors,
        sweeps,
    })
}
