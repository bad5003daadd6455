//! Row-major f32 GEMM with optional row-parallel execution.
//!
//! `SSACGAN_THREADS` (default 1) caps kernel parallelism. The parallel path
//! splits output rows into contiguous blocks, so each output element is still
//! produced by a single sequential contraction.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

static KERNEL_THREADS: OnceLock<AtomicUsize> = OnceLock::new();

fn threads_cell() -> &'static AtomicUsize {
    KERNEL_THREADS.get_or_init(|| {
        let n = std::env::var("SSACGAN_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|n| *n > 0)
            .unwrap_or(1);
        AtomicUsize::new(n)
    })
}

/// Current kernel-parallelism cap.
pub fn kernel_threads() -> usize {
    threads_cell().load(Ordering::Relaxed)
}

/// Override the kernel-parallelism cap (takes precedence over the env var).
pub fn set_kernel_threads(n: usize) {
    threads_cell().store(n.max(1), Ordering::Relaxed);
}

/// c[m,n] = a[m,k] * b[k,n] + beta * c, all row-major contiguous.
pub(crate) fn matmul_rm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    b: &[f32],
    c: &mut [f32],
    beta: f32,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }

    let threads = kernel_threads().min(m);
    if threads <= 1 {
        gemm_block(m, k, n, a, b, c, beta);
        return;
    }

    let rows_per = m.div_ceil(threads);
    use rayon::prelude::*;
    c.par_chunks_mut(rows_per * n)
        .zip(a.par_chunks(rows_per * k))
        .for_each(|(c_blk, a_blk)| {
            let rows = c_blk.len() / n;
            gemm_block(rows, k, n, a_blk, b, c_blk, beta);
        });
}

fn gemm_block(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], beta: f32) {
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = acc;
            }
        }
        c
    }

    #[test]
    fn matches_naive_product() {
        let (m, k, n) = (5, 7, 9);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut c = vec![0.0f32; m * n];
        matmul_rm(m, k, n, &a, &b, &mut c, 0.0);
        let want = naive(m, k, n, &a, &b);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }

    #[test]
    fn beta_accumulates() {
        let a = vec![1.0f32, 2.0];
        let b = vec![3.0f32, 4.0];
        let mut c = vec![10.0f32];
        matmul_rm(1, 2, 1, &a, &b, &mut c, 1.0);
        assert_eq!(c[0], 21.0);
    }
}
