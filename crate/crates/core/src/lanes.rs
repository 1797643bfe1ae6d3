//! Slice kernels written with independent lane accumulators so they
//! vectorize without `-ffast-math`-style reassociation.

use num_traits::Float;

pub(crate) const LANES: usize = 8;

pub(crate) fn transpose<T: Copy>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(src[r * cols + c]);
        }
    }
    out
}

/// Dot product with independent lane accumulators so it vectorizes.
#[inline(always)]
pub(crate) fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let (ac, at) = a.split_at(a.len() / LANES * LANES);
    let (bc, bt) = b.split_at(ac.len());
    for (x, y) in ac.chunks_exact(LANES).zip(bc.chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut total = at.iter().zip(bt).fold(T::zero(), |s, (&x, &y)| s + x * y);
    for v in acc {
        total = total + v;
    }
    total
}

#[inline(always)]
pub(crate) fn lane_max<T: Float>(a: &[T]) -> T {
    let mut acc = [T::neg_infinity(); LANES];
    let (ac, at) = a.split_at(a.len() / LANES * LANES);
    for x in ac.chunks_exact(LANES) {
        for l in 0..LANES {
            acc[l] = acc[l].max(x[l]);
        }
    }
    at.iter().chain(acc.iter()).fold(T::neg_infinity(), |m, &v| m.max(v))
}

#[inline(always)]
pub(crate) fn lane_sum<T: Float>(a: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let (ac, at) = a.split_at(a.len() / LANES * LANES);
    for x in ac.chunks_exact(LANES) {
        for l in 0..LANES {
            acc[l] = acc[l] + x[l];
        }
    }
    at.iter().chain(acc.iter()).fold(T::zero(), |s, &v| s + v)
}

