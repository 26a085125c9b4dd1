//! Matrix multiply kernels.
//!
//! Every kernel accumulates in a fixed deterministic order: reductions use
//! eight independent accumulator lanes combined in a fixed tree, and
//! parallelism only ever splits over disjoint output rows. Results are
//! therefore bit-identical across runs and thread counts.

use super::Real;
use rayon::prelude::*;

/// Operand layout of a matrix product with output (m, n).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatKind {
    /// a (m, k) @ b (k, n)
    NN,
    /// a (m, k) @ b (n, k)^T
    NT,
    /// a (k, m)^T @ b (k, n)
    TN,
}

/// Fixed-order dot product with eight vectorizable accumulator lanes.
#[inline]
pub fn dot8<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::ZERO; 8];
    let mut ai = a.chunks_exact(8);
    let mut bi = b.chunks_exact(8);
    for (ca, cb) in (&mut ai).zip(&mut bi) {
        for l in 0..8 {
            acc[l] = acc[l] + ca[l] * cb[l];
        }
    }
    let mut tail = T::ZERO;
    for (&x, &y) in ai.remainder().iter().zip(bi.remainder()) {
        tail += x * y;
    }
    (((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]))) + tail
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

#[inline]
fn row_nn<T: Real>(a_row: &[T], b: &[T], k: usize, n: usize, out_row: &mut [T]) {
    for (kk, &aik) in a_row.iter().enumerate().take(k) {
        axpy(aik, &b[kk * n..(kk + 1) * n], out_row);
    }
}

#[inline]
fn row_nt<T: Real>(a_row: &[T], b: &[T], k: usize, out_row: &mut [T]) {
    for (j, oj) in out_row.iter_mut().enumerate() {
        *oj = *oj + dot8(a_row, &b[j * k..(j + 1) * k]);
    }
}

#[inline]
fn row_tn<T: Real>(a: &[T], i: usize, b: &[T], k: usize, m: usize, n: usize, out_row: &mut [T]) {
    for kk in 0..k {
        axpy(a[kk * m + i], &b[kk * n..(kk + 1) * n], out_row);
    }
}

/// Batched matrix product, accumulated into `out` (callers zero it first).
/// `a` holds `batch` blocks; `b` holds `batch` blocks unless `b_shared`,
/// in which case one block is reused by every batch element. Output rows
/// are computed independently, so the row-level parallelism below cannot
/// change results.
pub fn matmul<T: Real>(
    kind: MatKind,
    a: &[T],
    b: &[T],
    out: &mut [T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
) {
    debug_assert_eq!(a.len(), batch * m * k);
    debug_assert_eq!(b.len(), if b_shared { 1 } else { batch } * k * n);
    debug_assert_eq!(out.len(), batch * m * n);
    let b_block = k * n;
    let do_row = |row: usize, out_row: &mut [T]| {
        let l = row / m;
        let i = row % m;
        let bl = if b_shared { b } else { &b[l * b_block..(l + 1) * b_block] };
        match kind {
            MatKind::NN => {
                let a_row = &a[(l * m + i) * k..(l * m + i + 1) * k];
                row_nn(a_row, bl, k, n, out_row);
            }
            MatKind::NT => {
                let a_row = &a[(l * m + i) * k..(l * m + i + 1) * k];
                row_nt(a_row, bl, k, out_row);
            }
            MatKind::TN => {
                let al = &a[l * k * m..(l + 1) * k * m];
                row_tn(al, i, bl, k, m, n, out_row);
            }
        }
    };
    let total_rows = batch * m;
    let flops_per_row = 2 * k * n;
    if total_rows > 1 && total_rows * flops_per_row > 262_144 && rayon::current_num_threads() > 1
    {
        let min_rows = (65_536 / flops_per_row.max(1)).max(1);
        out.par_chunks_mut(n)
            .with_min_len(min_rows)
            .enumerate()
            .for_each(|(row, out_row)| do_row(row, out_row));
    } else {
        for (row, out_row) in out.chunks_mut(n).enumerate() {
            do_row(row, out_row);
        }
    }
}

/// As [`matmul`] but sums the `batch` contributions into a single (m, n)
/// output block, in fixed batch order. Used for gradients of weights that
/// are shared across a batch.
pub fn matmul_sum_batches<T: Real>(
    kind: MatKind,
    a: &[T],
    b: &[T],
    out: &mut [T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(out.len(), m * n);
    // Element counts per block are m*k and k*n for every kind; only the
    // in-block layout differs.
    let a_block = m * k;
    let b_block = k * n;
    debug_assert_eq!(a.len(), batch * a_block);
    debug_assert_eq!(b.len(), batch * b_block);
    for l in 0..batch {
        let al = &a[l * a_block..(l + 1) * a_block];
        let bl = &b[l * b_block..(l + 1) * b_block];
        matmul(kind, al, bl, out, 1, m, k, n, false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    c[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn kinds_agree_with_naive_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(m, k, n) in &[(1usize, 1usize, 1usize), (3, 5, 4), (17, 9, 23), (8, 32, 8)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let want = naive(&a, &b, m, k, n);
            let tol = 1e-12;

            let mut out = vec![0.0; m * n];
            matmul(MatKind::NN, &a, &b, &mut out, 1, m, k, n, false);
            for (x, y) in out.iter().zip(&want) {
                assert!((x - y).abs() < tol);
            }

            let bt = transpose(&b, k, n);
            let mut out = vec![0.0; m * n];
            matmul(MatKind::NT, &a, &bt, &mut out, 1, m, k, n, false);
            for (x, y) in out.iter().zip(&want) {
                assert!((x - y).abs() < tol);
            }

            let at = transpose(&a, m, k);
            let mut out = vec![0.0; m * n];
            matmul(MatKind::TN, &at, &b, &mut out, 1, m, k, n, false);
            for (x, y) in out.iter().zip(&want) {
                assert!((x - y).abs() < tol);
            }
        }
    }

    #[test]
    fn shared_rhs_matches_per_batch_rhs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (batch, m, k, n) = (3, 4, 5, 6);
        let a: Vec<f64> = (0..batch * m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b_rep: Vec<f64> = (0..batch).flat_map(|_| b.clone()).collect();
        let mut shared = vec![0.0; batch * m * n];
        let mut tiled = vec![0.0; batch * m * n];
        matmul(MatKind::NN, &a, &b, &mut shared, batch, m, k, n, true);
        matmul(MatKind::NN, &a, &b_rep, &mut tiled, batch, m, k, n, false);
        assert_eq!(shared, tiled);
    }

    #[test]
    fn sum_batches_accumulates_in_batch_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (batch, m, k, n) = (4, 3, 2, 5);
        let a: Vec<f64> = (0..batch * m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..batch * k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut summed = vec![0.0; m * n];
        matmul_sum_batches(MatKind::NN, &a, &b, &mut summed, batch, m, k, n);
        let mut expect = vec![0.0; m * n];
        for l in 0..batch {
            let c = naive(&a[l * m * k..(l + 1) * m * k], &b[l * k * n..(l + 1) * k * n], m, k, n);
            for (e, v) in expect.iter_mut().zip(&c) {
                *e += v;
            }
        }
        for (x, y) in summed.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dot8_is_exactly_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f32> = (0..1027).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..1027).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert_eq!(dot8(&a, &b).to_bits(), dot8(&a, &b).to_bits());
    }
}
