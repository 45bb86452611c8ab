//! Matrix-multiply kernels: the only hot loops in the laboratory.
//!
//! All three variants parallelize over disjoint output rows, so results are
//! bit-identical regardless of thread count or scheduling. Inner loops run
//! over contiguous slices so they autovectorize. When `accumulate` is set the
//! product is added into `out` instead of overwriting it — backward passes
//! use this to fold gradient contributions without temporaries.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Below this many multiply-adds the rayon dispatch overhead dominates.
const PAR_THRESHOLD: usize = 16 * 1024;

/// `out[m,n] = (+=) a[m,k] · b[k,n]`
pub fn matmul_nn<S: Scalar>(
    a: &[S],
    b: &[S],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [S],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |(orow, arow): (&mut [S], &[S])| {
        if !accumulate {
            orow.iter_mut().for_each(|v| *v = S::zero());
        }
        for (kk, &av) in arow.iter().enumerate() {
            if av != S::zero() {
                let brow = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).zip(a.par_chunks(k)).for_each(row);
    } else {
        out.chunks_mut(n).zip(a.chunks(k)).for_each(row);
    }
}

/// `out[m,n] = (+=) a[m,k] · b[n,k]ᵀ` — both operands read along contiguous rows.
pub fn matmul_nt<S: Scalar>(
    a: &[S],
    b: &[S],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [S],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let row = |(orow, arow): (&mut [S], &[S])| {
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            if accumulate {
                *o += acc;
            } else {
                *o = acc;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).zip(a.par_chunks(k)).for_each(row);
    } else {
        out.chunks_mut(n).zip(a.chunks(k)).for_each(row);
    }
}

/// `out[k,n] = (+=) a[m,k]ᵀ · b[m,n]` — the weight-gradient shape.
pub fn matmul_tn<S: Scalar>(
    a: &[S],
    b: &[S],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [S],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let row = |(kk, orow): (usize, &mut [S])| {
        if !accumulate {
            orow.iter_mut().for_each(|v| *v = S::zero());
        }
        for i in 0..m {
            let av = a[i * k + kk];
            if av != S::zero() {
                let brow = &b[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}
