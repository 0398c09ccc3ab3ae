use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{CoreError, Result};

/// Fixed row-chunk size for parallel kernels.
///
/// Work is always split into chunks of this many output rows regardless of
/// how many workers exist, and every output element is written by exactly one
/// task with a fixed inner summation order. That makes results bit-identical
/// across worker counts; the scheduler only decides who runs which chunk.
const ROW_CHUNK: usize = 64;

/// Handle to an optional thread pool used by the row-parallel kernels.
///
/// `Workers::serial()` (or `new(1)`) runs everything on the calling thread
/// without touching rayon, so single-worker runs have no pool overhead and
/// no dependence on the global rayon configuration.
#[derive(Clone)]
pub struct Workers {
    pool: Option<Arc<rayon::ThreadPool>>,
    count: usize,
}

impl Workers {
    pub fn serial() -> Self {
        Workers { pool: None, count: 1 }
    }

    pub fn new(n: usize) -> Result<Self> {
        if n <= 1 {
            return Ok(Self::serial());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CoreError::Config(format!("cannot build {n}-thread pool: {e}")))?;
        Ok(Workers { pool: Some(Arc::new(pool)), count: n })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Run `body` over `rows` chunks of `ROW_CHUNK` rows each, in parallel when
    /// a pool is present. `body(chunk_start_row, out_chunk)` must only write
    /// its own chunk of `out`, which has `width` columns per row.
    pub(crate) fn for_row_chunks<F>(&self, out: &mut [f64], width: usize, body: F)
    where
        F: Fn(usize, &mut [f64]) + Sync,
    {
        let chunk_len = ROW_CHUNK * width;
        match &self.pool {
            Some(pool) => pool.install(|| {
                out.par_chunks_mut(chunk_len.max(1))
                    .enumerate()
                    .for_each(|(ci, chunk)| body(ci * ROW_CHUNK, chunk));
            }),
            None => {
                for (ci, chunk) in out.chunks_mut(chunk_len.max(1)).enumerate() {
                    body(ci * ROW_CHUNK, chunk);
                }
            }
        }
    }
}

impl std::fmt::Debug for Workers {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Workers({})", self.count)
    }
}

/// `c += a @ b` where `a` is `p x q`, `b` is `q x r`, `c` is `p x r`.
///
/// i-k-j loop order: the inner loop walks rows of `b` and `c` contiguously.
/// Row-parallel over `c`; summation order per element is fixed.
pub fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], p: usize, q: usize, r: usize, w: &Workers) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(b.len(), q * r);
    debug_assert_eq!(c.len(), p * r);
    w.for_row_chunks(c, r, |row0, chunk| {
        for (local, crow) in chunk.chunks_mut(r).enumerate() {
            let i = row0 + local;
            let arow = &a[i * q..(i + 1) * q];
            for (k, &aik) in arow.iter().enumerate() {
                let brow = &b[k * r..(k + 1) * r];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv = aik.mul_add(bv, *cv);
                }
            }
        }
    });
}

/// `c += a @ b^T` where `a` is `p x q`, `b` is `r x q`, `c` is `p x r`.
pub fn matmul_nt_acc(c: &mut [f64], a: &[f64], b: &[f64], p: usize, q: usize, r: usize, w: &Workers) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(b.len(), r * q);
    debug_assert_eq!(c.len(), p * r);
    w.for_row_chunks(c, r, |row0, chunk| {
        for (local, crow) in chunk.chunks_mut(r).enumerate() {
            let i = row0 + local;
            let arow = &a[i * q..(i + 1) * q];
            for (j, cv) in crow.iter_mut().enumerate() {
                let brow = &b[j * q..(j + 1) * q];
                let mut acc = 0.0;
                for (&av, &bv) in arow.iter().zip(brow) {
                    acc = av.mul_add(bv, acc);
                }
                *cv += acc;
            }
        }
    });
}

/// `c += a^T @ b` where `a` is `p x q`, `b` is `p x r`, `c` is `q x r`.
pub fn matmul_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], p: usize, q: usize, r: usize, w: &Workers) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(b.len(), p * r);
    debug_assert_eq!(c.len(), q * r);
    w.for_row_chunks(c, r, |row0, chunk| {
        let rows_here = chunk.len() / r;
        for k in 0..p {
            let brow = &b[k * r..(k + 1) * r];
            for local in 0..rows_here {
                let i = row0 + local;
                let aki = a[k * q + i];
                if aki == 0.0 {
                    continue;
                }
                let crow = &mut chunk[local * r..(local + 1) * r];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv = aki.mul_add(bv, *cv);
                }
            }
        }
    });
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        acc = x.mul_add(y, acc);
    }
    acc
}

pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = a.mul_add(xv, *yv);
    }
}
