//! Raw matmul kernels. All three accumulate into `out` so that forward and
//! backward paths share them; `out` must be pre-sized to the result.
//!
//! With the `parallel` feature the row loops run on rayon. Each output row is
//! written by exactly one task with a fixed inner order, so results are
//! bit-identical to the serial path.

use crate::scalar::Real;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 1 << 15;

/// `out[m,n] += a[m,k] * b[k,n]`
pub fn matmul_nn_acc<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |arow: &[F], orow: &mut [F]| {
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == F::zero() {
                continue;
            }
            let brow = &b[kk * n..kk * n + n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    };
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(orow, arow)| row(arow, orow));
        return;
    }
    for (orow, arow) in out.chunks_mut(n).zip(a.chunks(k)) {
        row(arow, orow);
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
///
/// Dot products run over eight fixed-order accumulators; the combine order
/// never varies, so results stay bit-identical while the dependency chain
/// shortens enough to pipeline.
pub fn matmul_nt_acc<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let row = |arow: &[F], orow: &mut [F]| {
        for (o, brow) in orow.iter_mut().zip(b.chunks(k)) {
            let mut acc = [F::zero(); 8];
            let mut i = 0usize;
            while i + 8 <= k {
                acc[0] = acc[0] + arow[i] * brow[i];
                acc[1] = acc[1] + arow[i + 1] * brow[i + 1];
                acc[2] = acc[2] + arow[i + 2] * brow[i + 2];
                acc[3] = acc[3] + arow[i + 3] * brow[i + 3];
                acc[4] = acc[4] + arow[i + 4] * brow[i + 4];
                acc[5] = acc[5] + arow[i + 5] * brow[i + 5];
                acc[6] = acc[6] + arow[i + 6] * brow[i + 6];
                acc[7] = acc[7] + arow[i + 7] * brow[i + 7];
                i += 8;
            }
            let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3]))
                + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
            while i < k {
                s = s + arow[i] * brow[i];
                i += 1;
            }
            *o = *o + s;
        }
    };
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(orow, arow)| row(arow, orow));
        return;
    }
    for (orow, arow) in out.chunks_mut(n).zip(a.chunks(k)) {
        row(arow, orow);
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`
pub fn matmul_tn_acc<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    // Serial over m keeps accumulation order fixed; parallelize over k rows.
    let row = |kk: usize, orow: &mut [F]| {
        for i in 0..m {
            let aik = a[i * k + kk];
            if aik == F::zero() {
                continue;
            }
            let brow = &b[i * n..i * n + n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    };
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(kk, orow)| row(kk, orow));
        return;
    }
    for (kk, orow) in out.chunks_mut(n).enumerate() {
        row(kk, orow);
    }
}
