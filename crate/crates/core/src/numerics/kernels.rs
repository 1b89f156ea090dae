//! Dense linear-algebra kernels shared by the graph ops and the tape-free
//! inference path.
//!
//! All kernels accumulate each output element in a fixed left-to-right
//! order, and parallel variants split work only across output rows, so
//! results are bit-identical regardless of thread count or the `parallel`
//! feature.

use crate::par;

/// Rows assigned to one parallel task. 64 rows of 128 doubles is 64 KiB of
/// output per task: large enough to amortize scheduling, small enough to
/// balance.
const ROWS_PER_TASK: usize = 64;

fn matmul_rows(chunk_idx: usize, chunk: &mut [f64], x: &[f64], w: &[f64], k: usize, n: usize) {
    let row0 = chunk_idx * ROWS_PER_TASK;
    for (r, orow) in chunk.chunks_mut(n).enumerate() {
        let xrow = &x[(row0 + r) * k..(row0 + r + 1) * k];
        orow.fill(0.0);
        for (p, &a) in xrow.iter().enumerate() {
            let wrow = &w[p * n..(p + 1) * n];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += a * wv;
            }
        }
    }
}

/// `out[m,n] = x[m,k] * w[k,n]`, row-major.
///
/// Per output row the k-loop is outermost and the contiguous n-loop
/// innermost (an "axpy" form), which vectorizes without reassociating any
/// individual sum. Rows may be computed in parallel.
pub fn matmul(x: &[f64], w: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(x.len(), m * k);
    debug_assert_eq!(w.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    par::for_each_chunk(out, ROWS_PER_TASK * n, |ci, chunk| matmul_rows(ci, chunk, x, w, k, n));
}

/// Single-threaded [`matmul`], kept unconditionally for benchmarks and for
/// asserting that the parallel path is bit-identical.
pub fn matmul_seq(x: &[f64], w: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(x.len(), m * k);
    debug_assert_eq!(w.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    par::for_each_chunk_seq(out, ROWS_PER_TASK * n, |ci, chunk| matmul_rows(ci, chunk, x, w, k, n));
}

/// `out[k,n] = transpose(x[m,k]) * dy[m,n]`: the weight-gradient kernel.
///
/// Output rows are computed in blocks of four so each streaming pass over
/// `dy` feeds four accumulator rows; per-element summation order is still
/// plain `t = 0..m`.
pub fn matmul_tn(x: &[f64], dy: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(x.len(), m * k);
    debug_assert_eq!(dy.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    par::for_each_chunk(out, ROWS_PER_TASK * n, |chunk_idx, chunk| {
        let mut i = chunk_idx * ROWS_PER_TASK;
        let mut rest = chunk;
        while rest.len() >= 4 * n {
            let (quad, tail) = rest.split_at_mut(4 * n);
            rest = tail;
            let (r0, q) = quad.split_at_mut(n);
            let (r1, q) = q.split_at_mut(n);
            let (r2, r3) = q.split_at_mut(n);
            r0.fill(0.0);
            r1.fill(0.0);
            r2.fill(0.0);
            r3.fill(0.0);
            for t in 0..m {
                let xr = &x[t * k..t * k + k];
                let (a0, a1, a2, a3) = (xr[i], xr[i + 1], xr[i + 2], xr[i + 3]);
                let dyrow = &dy[t * n..(t + 1) * n];
                for j in 0..n {
                    let d = dyrow[j];
                    r0[j] += a0 * d;
                    r1[j] += a1 * d;
                    r2[j] += a2 * d;
                    r3[j] += a3 * d;
                }
            }
            i += 4;
        }
        for orow in rest.chunks_mut(n) {
            orow.fill(0.0);
            for t in 0..m {
                let a = x[t * k + i];
                let dyrow = &dy[t * n..(t + 1) * n];
                for (o, &d) in orow.iter_mut().zip(dyrow) {
                    *o += a * d;
                }
            }
            i += 1;
        }
    });
}

/// Transpose a row-major `[r, c]` matrix into `[c, r]`.
pub fn transpose(w: &[f64], r: usize, c: usize) -> Vec<f64> {
    debug_assert_eq!(w.len(), r * c);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = w[i * c + j];
        }
    }
    out
}

/// Add a length-`n` bias row to each of `m` rows in place.
pub fn add_bias(y: &mut [f64], b: &[f64], m: usize, n: usize) {
    debug_assert_eq!(y.len(), m * n);
    debug_assert_eq!(b.len(), n);
    for row in y.chunks_mut(n).take(m) {
        for (v, &bv) in row.iter_mut().zip(b) {
            *v += bv;
        }
    }
}

/// Column sums of a `[m, n]` matrix: the bias-gradient kernel.
pub fn sum_rows(dy: &[f64], m: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(dy.len(), m * n);
    let mut out = vec![0.0; n];
    for row in dy.chunks(n).take(m) {
        for (o, &d) in out.iter_mut().zip(row) {
            *o += d;
        }
    }
    out
}

/// Numerically stable logistic function; exact 0.5 at 0.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
