//! Small dense linear algebra in f64: a cyclic Jacobi eigensolver for
//! symmetric matrices and the few dense helpers the metric paths need.
//! Matrices are row-major `Vec<f64>`.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix of {len} elements is not {n}x{n}")]
    BadShape { len: usize, n: usize },
    #[error("matrix is not symmetric: |a[{i},{j}] - a[{j},{i}]| = {diff}")]
    NotSymmetric { i: usize, j: usize, diff: f64 },
    #[error("jacobi sweep limit reached with off-diagonal norm {off}")]
    NoConvergence { off: f64 },
}

/// Eigendecomposition of a symmetric matrix. `values` ascend;
/// column `k` of `vectors` is the unit eigenvector for `values[k]`.
#[derive(Debug, Clone)]
pub struct Eigen {
    pub n: usize,
    pub values: Vec<f64>,
    pub vectors: Vec<f64>,
}

const SYMMETRY_TOL: f64 = 1e-9;
const MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi rotations. Quadratic convergence makes ~10 sweeps
/// sufficient for the feature dimensions used here (n <= a few hundred).
pub fn symmetric_eigen(a: &[f64], n: usize) -> Result<Eigen, LinalgError> {
    if a.len() != n * n {
        return Err(LinalgError::BadShape { len: a.len(), n });
    }
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let diff = (a[i * n + j] - a[j * n + i]).abs();
            if diff > SYMMETRY_TOL * scale {
                return Err(LinalgError::NotSymmetric { i, j, diff });
            }
        }
    }

    let mut m = a.to_vec();
    // Force exact symmetry so rotations stay consistent.
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = avg;
            m[j * n + i] = avg;
        }
    }
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += m[i * n + j] * m[i * n + j];
            }
        }
        (2.0 * s).sqrt()
    };

    let frob: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let tol = 1e-14 * frob;

    for _sweep in 0..MAX_SWEEPS {
        if off(&m) <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() <= tol / (n as f64) {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                // Smaller-angle root keeps rotations stable.
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
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
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let final_off = off(&m);
    if final_off > 1e-10 * frob.max(1.0) {
        return Err(LinalgError::NoConvergence { off: final_off });
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    order.sort_by(|&i, &j| diag[i].partial_cmp(&diag[j]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut vectors = vec![0.0f64; n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        for row in 0..n {
            vectors[row * n + new_col] = v[row * n + old_col];
        }
    }
    Ok(Eigen { n, values, vectors })
}

/// C = A @ B for row-major (m,k) x (k,n).
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut c = vec![0.0f64; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aik * bj;
            }
        }
    }
    c
}

/// Symmetric inverse square root via eigendecomposition, with eigenvalues
/// floored at `floor` before the -1/2 power. Used for whitening.
pub fn inverse_sqrt_psd(a: &[f64], n: usize, floor: f64) -> Result<Vec<f64>, LinalgError> {
    let eig = symmetric_eigen(a, n)?;
    // W = U diag(lambda^-1/2) U^T
    let mut scaled = vec![0.0f64; n * n];
    for col in 0..n {
        let lam = eig.values[col].max(floor);
        let inv = 1.0 / lam.sqrt();
        for row in 0..n {
            scaled[row * n + col] = eig.vectors[row * n + col] * inv;
        }
    }
    let mut ut = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            ut[i * n + j] = eig.vectors[j * n + i];
        }
    }
    Ok(matmul(&scaled, &ut, n, n, n))
}
