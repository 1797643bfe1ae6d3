//! Single-head scaled dot-product attention as a fused CPU kernel.
//!
//! `out = softmax(Q Kᵀ · scale) V` with `Q: N×d`, `K: M×d`, `V: M×dv`.
//! Query rows are processed in small blocks. When gradients are tracked and
//! the `N×M` weight matrix is small enough it is kept for the backward pass;
//! otherwise the backward pass recomputes it block by block, so memory stays
//! `O((N + M)·d)` beyond the inputs.

use std::sync::{Arc, Mutex};

use candle_core::{CpuStorage, CustomOp3, DType, Layout, Shape, Tensor};
use num_traits::Float;

use crate::error::{Error, Result};
use crate::lanes::{dot, lane_max, lane_sum, transpose, LANES};

/// Element type of the kernels: a float with a slice-wide `exp`.
pub(crate) trait KernelFloat: Float {
    fn exp_in_place(xs: &mut [Self]);
}

impl KernelFloat for f64 {
    #[inline(always)]
    fn exp_in_place(xs: &mut [Self]) {
        xs.iter_mut().for_each(|x| *x = exp_f64(*x));
    }
}

impl KernelFloat for f32 {
    #[inline(always)]
    fn exp_in_place(xs: &mut [Self]) {
        xs.iter_mut().for_each(|x| *x = exp_f32(*x));
    }
}

/// Branch-free `exp` for f32 that vectorizes: range reduction to
/// `r ∈ [-ln2/2, ln2/2]`, a degree-6 polynomial, then exponent assembly.
/// Relative error stays within a few ulp; arguments are clamped to the
/// normal range.
#[inline(always)]
pub(crate) fn exp_f32(x: f32) -> f32 {
    const ROUND: f32 = 12_582_912.0; // 1.5 · 2²³
    // max/min rather than clamp: clamp keeps NaN and stops vectorization.
    let x = x.max(-87.3).min(88.3);
    let t = x * std::f32::consts::LOG2_E + ROUND;
    let k = t - ROUND;
    let r = x - k * 0.693_359_4 + k * 2.121_944_4e-4;
    let p = 1.987_569_1e-4_f32;
    let p = p * r + 1.398_199_9e-3;
    let p = p * r + 8.333_452e-3;
    let p = p * r + 4.166_579_6e-2;
    let p = p * r + 1.666_666_5e-1;
    let p = p * r + 5.000_000_1e-1;
    let y = p * r * r + r + 1.0;
    let e = t.to_bits().wrapping_sub(0x4B40_0000 - 127) << 23;
    y * f32::from_bits(e)
}

/// The f64 counterpart: Cody–Waite reduction with a split `ln 2`, then a
/// degree-13 Taylor polynomial (truncation error below 1e-17 on the reduced
/// range). Within a few ulp of `f64::exp` for arguments above -708.
#[inline(always)]
pub(crate) fn exp_f64(x: f64) -> f64 {
    const ROUND: f64 = 6_755_399_441_055_744.0; // 1.5 · 2⁵²
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const C: [f64; 12] = [
        1.0 / 6227020800.0,
        1.0 / 479001600.0,
        1.0 / 39916800.0,
        1.0 / 3628800.0,
        1.0 / 362880.0,
        1.0 / 40320.0,
        1.0 / 5040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
    ];
    let x = x.max(-708.0).min(709.0);
    let t = x * std::f64::consts::LOG2_E + ROUND;
    let k = t - ROUND;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let mut p = C[0];
    for &c in &C[1..] {
        p = p * r + c;
    }
    let y = p * r * r + r + 1.0;
    let e = t.to_bits().wrapping_sub(ROUND.to_bits() - 1023) << 52;
    y * f64::from_bits(e)
}

struct Dims {
    n: usize,
    m: usize,
    d: usize,
    dv: usize,
}

/// Query rows handled together so each key/value load is reused.
const ROWS: usize = 4;

/// `out[r][j] = Σ_c a[r][c] · bt[c][j]` with `a: R×k`, `bt: k×m`, `out: R×m`.
#[inline(always)]
fn expand<T: Float, const R: usize>(a: &[T], bt: &[T], k: usize, m: usize, out: &mut [T]) {
    for r in 0..R {
        let row = &mut out[r * m..(r + 1) * m];
        row.iter_mut().for_each(|x| *x = T::zero());
        for c in 0..k {
            let x = a[r * k + c];
            for (o, &b) in row.iter_mut().zip(&bt[c * m..(c + 1) * m]) {
                *o = *o + x * b;
            }
        }
    }
}

/// `out[r][c] = Σ_j p[r][j] · bt[c][j]` with `p: R×m`, `bt: k×m`, `out: R×k`.
#[inline(always)]
fn contract<T: Float, const R: usize>(p: &[T], bt: &[T], k: usize, m: usize, out: &mut [T]) {
    let full = m / LANES * LANES;
    for c in 0..k {
        let b = &bt[c * m..(c + 1) * m];
        let mut acc = [[T::zero(); LANES]; R];
        for j in (0..full).step_by(LANES) {
            let bv: &[T; LANES] = b[j..j + LANES].try_into().unwrap();
            for r in 0..R {
                let pv: &[T; LANES] = p[r * m + j..r * m + j + LANES].try_into().unwrap();
                for l in 0..LANES {
                    acc[r][l] = acc[r][l] + pv[l] * bv[l];
                }
            }
        }
        for r in 0..R {
            let mut s = T::zero();
            for j in full..m {
                s = s + p[r * m + j] * b[j];
            }
            out[r * k + c] = acc[r].iter().fold(s, |t, &v| t + v);
        }
    }
}

/// `acc[c][j] += Σ_r a[r][c] · p[r][j]` with `a: R×k`, `p: R×m`, `acc: k×m`.
#[inline(always)]
fn accumulate<T: Float, const R: usize>(acc: &mut [T], a: &[T], p: &[T], k: usize, m: usize) {
    for c in 0..k {
        let dst = &mut acc[c * m..(c + 1) * m];
        for (j, x) in dst.iter_mut().enumerate() {
            let mut s = *x;
            for r in 0..R {
                s = s + a[r * k + c] * p[r * m + j];
            }
            *x = s;
        }
    }
}

/// Turns a row of logits into softmax weights; false if a logit is not
/// finite.
#[inline(always)]
fn softmax_in_place<T: KernelFloat>(row: &mut [T]) -> bool {
    let max = lane_max(row);
    if !max.is_finite() || !lane_sum(row).is_finite() {
        return false;
    }
    row.iter_mut().for_each(|r| *r = *r - max);
    T::exp_in_place(row);
    let inv = lane_sum(row).recip();
    row.iter_mut().for_each(|r| *r = *r * inv);
    true
}

/// Softmax weights for `R` query rows (already multiplied by the scale).
#[inline(always)]
fn weights_block<T: KernelFloat, const R: usize>(qs: &[T], kt: &[T], d: usize, m: usize, p: &mut [T]) -> std::result::Result<(), usize> {
    expand::<T, R>(qs, kt, d, m, p);
    for r in 0..R {
        if !softmax_in_place(&mut p[r * m..(r + 1) * m]) {
            return Err(r);
        }
    }
    Ok(())
}

/// Row blocks `(start, len)` covering `0..n`.
fn row_blocks(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).step_by(ROWS).map(move |i| (i, ROWS.min(n - i)))
}

/// Output rows plus, when `keep` is set, the full `n × m` weight matrix.
#[inline(always)]
fn forward_kernel<T: KernelFloat>(q: &[T], k: &[T], v: &[T], dims: &Dims, scale: T, keep: Option<Vec<T>>) -> Forward<T> {
    let Dims { n, m, d, dv } = *dims;
    let qs: Vec<T> = q.iter().map(|&x| x * scale).collect();
    let kt = transpose(k, m, d);
    let vt = transpose(v, m, dv);
    if m > 0 && k.chunks_exact(d.max(1)).all(|row| row == &k[..d]) {
        return uniform_forward(&qs, &k[..d], &vt, dims).map(|out| (out, None));
    }
    let (mut kept, keep) = match keep {
        Some(mut buf) => {
            buf.resize(n * m, T::zero());
            (buf, true)
        }
        None => (Vec::new(), false),
    };
    let mut scratch = if keep { Vec::new() } else { vec![T::zero(); ROWS * m] };
    let mut out = vec![T::zero(); n * dv];
    for (i, len) in row_blocks(n) {
        let p = if keep { &mut kept[i * m..(i + len) * m] } else { &mut scratch[..len * m] };
        let qb = &qs[i * d..(i + len) * d];
        let ob = &mut out[i * dv..(i + len) * dv];
        if len == ROWS {
            weights_block::<T, ROWS>(qb, &kt, d, m, p).map_err(|r| i + r)?;
            contract::<T, ROWS>(p, &vt, dv, m, ob);
        } else {
            for r in 0..len {
                let pr = &mut p[r * m..(r + 1) * m];
                weights_block::<T, 1>(&qb[r * d..(r + 1) * d], &kt, d, m, pr).map_err(|_| i + r)?;
                contract::<T, 1>(pr, &vt, dv, m, &mut ob[r * dv..(r + 1) * dv]);
            }
        }
    }
    Ok((out, keep.then_some(kept)))
}

/// Identical keys give every query the same uniform weight row, whatever the
/// query; the output is that row applied to `V`, computed once. Matches the
/// general path bit for bit.
fn uniform_forward<T: KernelFloat>(qs: &[T], key: &[T], vt: &[T], dims: &Dims) -> std::result::Result<Vec<T>, usize> {
    let Dims { n, m, d, dv } = *dims;
    let total = T::from(m).unwrap_or_else(T::infinity);
    for i in 0..n {
        let logit = qs[i * d..(i + 1) * d].iter().zip(key).fold(T::zero(), |s, (&a, &b)| s + a * b);
        if !logit.is_finite() || !(logit * total).is_finite() {
            return Err(i);
        }
    }
    let mut p = vec![T::zero(); m];
    softmax_in_place(&mut p);
    let mut row = vec![T::zero(); dv];
    contract::<T, 1>(&p, vt, dv, m, &mut row);
    Ok(row.repeat(n))
}

#[inline(always)]
fn backward_block<T: KernelFloat, const R: usize>(
    qb: &[T],
    go: &[T],
    p: &[T],
    kt: &[T],
    vt: &[T],
    dims: &Dims,
    scale: T,
    ds: &mut [T],
    dq: &mut [T],
    dkt: &mut [T],
    dvt: &mut [T],
) {
    let Dims { m, d, dv, .. } = *dims;
    // dP = dO Vᵀ
    expand::<T, R>(go, vt, dv, m, ds);
    accumulate::<T, R>(dvt, go, p, dv, m);
    for r in 0..R {
        let (pr, dr) = (&p[r * m..(r + 1) * m], &mut ds[r * m..(r + 1) * m]);
        let mean = dot(pr, dr);
        for (x, &pj) in dr.iter_mut().zip(pr) {
            *x = pj * (*x - mean) * scale;
        }
    }
    contract::<T, R>(ds, kt, d, m, dq);
    accumulate::<T, R>(dkt, qb, ds, d, m);
}

/// Returns `[dQ (n·d) | dK (m·d) | dV (m·dv)]`. `weights` is the forward
/// `n × m` matrix when it was kept; otherwise rows are recomputed.
#[inline(always)]
fn backward_kernel<T: KernelFloat>(q: &[T], k: &[T], v: &[T], grad_out: &[T], weights: Option<&[T]>, dims: &Dims, scale: T) -> std::result::Result<Vec<T>, usize> {
    let Dims { n, m, d, dv } = *dims;
    let qs: Vec<T> = q.iter().map(|&x| x * scale).collect();
    let kt = transpose(k, m, d);
    let vt = transpose(v, m, dv);
    let mut dq = vec![T::zero(); n * d];
    let mut dkt = vec![T::zero(); d * m];
    let mut dvt = vec![T::zero(); dv * m];
    let mut scratch = vec![T::zero(); ROWS * m];
    let mut ds = vec![T::zero(); ROWS * m];
    for (i, len) in row_blocks(n) {
        let p: &[T] = match weights {
            Some(w) => &w[i * m..(i + len) * m],
            None => {
                for r in 0..len {
                    weights_block::<T, 1>(&qs[(i + r) * d..(i + r + 1) * d], &kt, d, m, &mut scratch[r * m..(r + 1) * m])
                        .map_err(|_| i + r)?;
                }
                &scratch[..len * m]
            }
        };
        let (qb, gb) = (&q[i * d..(i + len) * d], &grad_out[i * dv..(i + len) * dv]);
        let dqb = &mut dq[i * d..(i + len) * d];
        if len == ROWS {
            backward_block::<T, ROWS>(qb, gb, p, &kt, &vt, dims, scale, &mut ds, dqb, &mut dkt, &mut dvt);
        } else {
            for r in 0..len {
                backward_block::<T, 1>(
                    &qb[r * d..(r + 1) * d],
                    &gb[r * dv..(r + 1) * dv],
                    &p[r * m..(r + 1) * m],
                    &kt,
                    &vt,
                    dims,
                    scale,
                    &mut ds[..m],
                    &mut dqb[r * d..(r + 1) * d],
                    &mut dkt,
                    &mut dvt,
                );
            }
        }
    }
    let mut out = dq;
    out.extend(transpose(&dkt, d, m));
    out.extend(transpose(&dvt, dv, m));
    Ok(out)
}

type Forward<T> = std::result::Result<(Vec<T>, Option<Vec<T>>), usize>;
type Backward<T> = std::result::Result<Vec<T>, usize>;

// The generic kernels are compiled a second time with AVX2 enabled and
// picked at runtime. Neither build contracts to FMA, so both give
// bit-identical results.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn forward_avx2<T: KernelFloat>(q: &[T], k: &[T], v: &[T], dims: &Dims, scale: T, keep: Option<Vec<T>>) -> Forward<T> {
    forward_kernel(q, k, v, dims, scale, keep)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn backward_avx2<T: KernelFloat>(q: &[T], k: &[T], v: &[T], g: &[T], w: Option<&[T]>, dims: &Dims, scale: T) -> Backward<T> {
    backward_kernel(q, k, v, g, w, dims, scale)
}

fn forward<T: KernelFloat>(q: &[T], k: &[T], v: &[T], dims: &Dims, scale: T, keep: Option<Vec<T>>) -> Forward<T> {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2.
        return unsafe { forward_avx2(q, k, v, dims, scale, keep) };
    }
    forward_kernel(q, k, v, dims, scale, keep)
}

fn backward<T: KernelFloat>(q: &[T], k: &[T], v: &[T], g: &[T], w: Option<&[T]>, dims: &Dims, scale: T) -> Backward<T> {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2.
        return unsafe { backward_avx2(q, k, v, g, w, dims, scale) };
    }
    backward_kernel(q, k, v, g, w, dims, scale)
}

/// Weight matrices up to this many entries are kept from the forward pass
/// for the backward pass; larger ones are recomputed row by row.
pub const KEEP_WEIGHTS_LIMIT: usize = 1 << 24;

enum Kept {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

type KeptSlot = Arc<Mutex<Option<Kept>>>;

// Released weight buffers, reused so repeated steps don't fault in fresh
// pages every time.
static POOL: Mutex<Vec<Kept>> = Mutex::new(Vec::new());
const POOL_SLOTS: usize = 8;

fn pooled_f32(len: usize) -> Vec<f32> {
    let mut pool = POOL.lock().unwrap();
    match pool.iter().position(|k| matches!(k, Kept::F32(v) if v.len() == len)) {
        Some(i) => match pool.swap_remove(i) {
            Kept::F32(v) => v,
            Kept::F64(_) => unreachable!(),
        },
        None => Vec::with_capacity(len),
    }
}

fn pooled_f64(len: usize) -> Vec<f64> {
    let mut pool = POOL.lock().unwrap();
    match pool.iter().position(|k| matches!(k, Kept::F64(v) if v.len() == len)) {
        Some(i) => match pool.swap_remove(i) {
            Kept::F64(v) => v,
            Kept::F32(_) => unreachable!(),
        },
        None => Vec::with_capacity(len),
    }
}

fn recycle(slot: &KeptSlot) {
    if let Some(k) = slot.lock().unwrap().take() {
        let mut pool = POOL.lock().unwrap();
        if pool.len() < POOL_SLOTS {
            pool.push(k);
        }
    }
}

fn slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("fused attention expects contiguous inputs"),
    }
}

fn dims2(layout: &Layout) -> candle_core::Result<(usize, usize)> {
    layout.shape().dims2()
}

fn non_finite(row: usize) -> candle_core::Error {
    candle_core::Error::Msg(format!("non-finite attention logit in query row {row}"))
}

struct AttentionForward {
    scale: f64,
    keep: bool,
    kept: KeptSlot,
}

impl CustomOp3 for AttentionForward {
    fn name(&self) -> &'static str {
        "fused-attention"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, d) = dims2(l1)?;
        let (m, d2) = dims2(l2)?;
        let (m2, dv) = dims2(l3)?;
        if d != d2 || m != m2 {
            candle_core::bail!("attention shapes q {n}x{d}, k {m}x{d2}, v {m2}x{dv}");
        }
        let dims = Dims { n, m, d, dv };
        let storage = match (s1, s2, s3) {
            (CpuStorage::F64(q), CpuStorage::F64(k), CpuStorage::F64(v)) => {
                let (out, w) = forward(slice(q, l1)?, slice(k, l2)?, slice(v, l3)?, &dims, self.scale, self.keep.then(|| pooled_f64(n * m)))
                    .map_err(non_finite)?;
                *self.kept.lock().unwrap() = w.map(Kept::F64);
                CpuStorage::F64(out)
            }
            (CpuStorage::F32(q), CpuStorage::F32(k), CpuStorage::F32(v)) => {
                let (out, w) = forward(slice(q, l1)?, slice(k, l2)?, slice(v, l3)?, &dims, self.scale as f32, self.keep.then(|| pooled_f32(n * m)))
                    .map_err(non_finite)?;
                *self.kept.lock().unwrap() = w.map(Kept::F32);
                CpuStorage::F32(out)
            }
            _ => candle_core::bail!("fused attention supports matching f32 or f64 inputs"),
        };
        Ok((storage, Shape::from((n, dv))))
    }

    fn bwd(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (n, d) = q.dims2()?;
        let (m, dv) = v.dims2()?;
        // The backward kernel needs four inputs; pack Q and dO side by side.
        let packed = Tensor::cat(&[q, &grad_res.contiguous()?], 1)?;
        let flat = packed.apply_op3_no_bwd(k, v, &AttentionBackward {
            scale: self.scale,
            d,
            kept: self.kept.clone(),
        })?;
        let dq = flat.narrow(0, 0, n * d)?.reshape((n, d))?;
        let dk = flat.narrow(0, n * d, m * d)?.reshape((m, d))?;
        let dvv = flat.narrow(0, n * d + m * d, m * dv)?.reshape((m, dv))?;
        Ok((Some(dq), Some(dk), Some(dvv)))
    }
}

struct AttentionBackward {
    scale: f64,
    d: usize,
    kept: KeptSlot,
}

impl CustomOp3 for AttentionBackward {
    fn name(&self) -> &'static str {
        "fused-attention-bwd"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, width) = dims2(l1)?;
        let (m, d) = dims2(l2)?;
        let (_, dv) = dims2(l3)?;
        if d != self.d || width != d + dv {
            candle_core::bail!("attention backward shape mismatch");
        }
        let dims = Dims { n, m, d, dv };
        fn split<T: Copy>(packed: &[T], n: usize, d: usize, dv: usize) -> (Vec<T>, Vec<T>) {
            let mut q = Vec::with_capacity(n * d);
            let mut g = Vec::with_capacity(n * dv);
            for row in packed.chunks_exact(d + dv) {
                q.extend_from_slice(&row[..d]);
                g.extend_from_slice(&row[d..]);
            }
            (q, g)
        }
        let len = n * d + m * d + m * dv;
        let kept = self.kept.lock().unwrap();
        let storage = match (s1, s2, s3) {
            (CpuStorage::F64(p), CpuStorage::F64(k), CpuStorage::F64(v)) => {
                let (q, g) = split(slice(p, l1)?, n, d, dv);
                let w = match kept.as_ref() {
                    Some(Kept::F64(w)) if w.len() == n * m => Some(w.as_slice()),
                    _ => None,
                };
                let out = backward(&q, slice(k, l2)?, slice(v, l3)?, &g, w, &dims, self.scale)
                    .map_err(non_finite)?;
                CpuStorage::F64(out)
            }
            (CpuStorage::F32(p), CpuStorage::F32(k), CpuStorage::F32(v)) => {
                let (q, g) = split(slice(p, l1)?, n, d, dv);
                let w = match kept.as_ref() {
                    Some(Kept::F32(w)) if w.len() == n * m => Some(w.as_slice()),
                    _ => None,
                };
                let out = backward(&q, slice(k, l2)?, slice(v, l3)?, &g, w, &dims, self.scale as f32)
                    .map_err(non_finite)?;
                CpuStorage::F32(out)
            }
            _ => candle_core::bail!("fused attention supports matching f32 or f64 inputs"),
        };
        drop(kept);
        recycle(&self.kept);
        Ok((storage, Shape::from(len)))
    }
}

/// `softmax(q kᵀ · scale) v` for `q: N×d`, `k: M×d`, `v: M×dv`, differentiable
/// in all three inputs.
pub fn fused_attention(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64) -> Result<Tensor> {
    for t in [q, k, v] {
        if t.rank() != 2 {
            return Err(Error::Shape(format!("attention operands must be 2-D, got {:?}", t.shape())));
        }
        if !matches!(t.dtype(), DType::F32 | DType::F64) {
            return Err(Error::InvalidInput(format!("unsupported dtype {:?}", t.dtype())));
        }
    }
    let tracked = q.track_op() || k.track_op() || v.track_op();
    let n = q.dim(0)?;
    let m = k.dim(0)?;
    let op = AttentionForward {
        scale,
        keep: tracked && n.saturating_mul(m) <= KEEP_WEIGHTS_LIMIT,
        kept: KeptSlot::default(),
    };
    let out = q.contiguous()?.apply_op3(&k.contiguous()?, &v.contiguous()?, op)?;
    Ok(out)
}

/// Explicit `N×M` attention weights, for inspection on small inputs.
pub fn attention_weights(q: &Tensor, k: &Tensor, scale: f64) -> Result<Tensor> {
    let logits = (q.matmul(&k.t()?)? * scale)?;
    let max = logits.max_keepdim(1)?;
    let e = logits.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(1)?)?)
}
