//! Guided token attention: project semantic tokens, align them to the depth
//! grid, inject them through gated cross-attention and fuse RGB features.

mod attention;
mod model;

use candle_core::{DType, Tensor, Var};

use crate::blocks::{check_channels, Conv, Rcab};
use crate::data::resample::BILINEAR;
use crate::error::{Error, Result};
use crate::params::{zero_var, ParamStore};

pub use attention::{attention_weights, fused_attention};
pub use model::{naima_forward, naima_plus_forward, LevelTrace, NaimaModel, Trace};

/// Rearranges `(1, C·r², h, w)` into `(1, C, h·r, w·r)` with
/// `out[c, y·r+dy, x·r+dx] = in[c·r² + dy·r + dx, y, x]`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::Shape(format!("{c} channels are not divisible by r² = {}", r * r)));
    }
    if r == 1 {
        return Ok(x.clone());
    }
    let oc = c / (r * r);
    Ok(x.reshape((b, oc, r, r, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((b, oc, h * r, w * r))?)
}

fn interp_matrix(in_len: usize, out_len: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let m = BILINEAR.axis_weights(in_len, out_len).to_dense();
    Ok(Tensor::from_vec(m, (out_len, in_len), device)?.to_dtype(dtype)?)
}

/// Bilinear resize of `(1, C, h, w)` as two interpolation-matrix products, so
/// gradients flow back to the input.
pub fn bilinear_resize(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    let my = interp_matrix(h, height, x.dtype(), x.device())?;
    let mx = interp_matrix(w, width, x.dtype(), x.device())?;
    let rows = x.reshape((c * h, w))?.matmul(&mx.t()?)?;
    let out = my.broadcast_matmul(&rows.reshape((c, h, width))?)?;
    Ok(out.reshape((1, c, height, width))?)
}

/// Token projection `S = P(τ)`: a 1×1 path plus a 3×3 path for local
/// spatial mixing, both `embed_dim → C·r²`.
pub struct Projection {
    pub pointwise: Conv,
    pub spatial: Conv,
    embed_dim: usize,
    out_channels: usize,
}

impl Projection {
    pub fn new(store: &mut ParamStore, name: &str, embed_dim: usize, channels: usize, r: usize) -> Result<Self> {
        let out_channels = channels * r * r;
        Ok(Self {
            pointwise: Conv::new(store, &format!("{name}.pointwise"), embed_dim, out_channels, 1)?,
            spatial: Conv::new(store, &format!("{name}.spatial"), embed_dim, out_channels, 3)?,
            embed_dim,
            out_channels,
        })
    }

    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        check_channels(tokens, self.embed_dim, "token projection")?;
        Ok((self.pointwise.forward(tokens)? + self.spatial.forward(tokens)?)?)
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Identity 1×1 path and a zero 3×3 path; needs `embed_dim = C·r²`.
    pub fn set_identity(&self) -> Result<()> {
        if self.embed_dim != self.out_channels {
            return Err(Error::Shape(format!(
                "identity projection needs embed_dim {} = {}",
                self.embed_dim, self.out_channels
            )));
        }
        let w = self.pointwise.weight.as_tensor();
        let eye = Tensor::eye(self.embed_dim, w.dtype(), w.device())?.reshape(w.shape())?;
        self.pointwise.weight.set(&eye)?;
        zero_var(&self.pointwise.bias)?;
        self.spatial.zero()
    }

    pub fn zero(&self) -> Result<()> {
        self.pointwise.zero()?;
        self.spatial.zero()
    }
}

/// `F_i`: pixel-shuffle by `r`, then bilinear resize onto the depth grid.
pub fn align_tokens(projected: &Tensor, r: usize, target: (usize, usize)) -> Result<Tensor> {
    bilinear_resize(&pixel_shuffle(projected, r)?, target.0, target.1)
}

/// `(1, C, H, W)` → `(H·W, C)`
fn flatten_positions(x: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    Ok(x.reshape((c, h * w))?.t()?.contiguous()?)
}

fn unflatten_positions(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let c = x.dims2()?.1;
    Ok(x.t()?.contiguous()?.reshape((1, c, h, w))?)
}

/// Single-head gated cross-attention, `D* = E + α · softmax(QKᵀ/√d_k) V`
/// with queries from depth and keys/values from semantics.
pub struct CrossAttention {
    /// `d_k × C`; `None` when the raw features are used.
    pub wq: Option<Var>,
    pub wk: Option<Var>,
    /// `C × C`
    pub wv: Option<Var>,
    pub alpha: Var,
    channels: usize,
    d_k: usize,
    max_n: usize,
}

impl CrossAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        d_k: usize,
        raw_qkv: bool,
        alpha_init: f64,
        max_n: usize,
    ) -> Result<Self> {
        if d_k == 0 {
            return Err(Error::Config("d_k must be positive".into()));
        }
        if raw_qkv && d_k != channels {
            return Err(Error::Config("raw_qkv requires d_k = channels".into()));
        }
        let bound = 1.0 / (channels as f64).sqrt();
        let (wq, wk, wv) = if raw_qkv {
            (None, None, None)
        } else {
            (
                Some(store.uniform(format!("{name}.wq"), &[d_k, channels], bound)?),
                Some(store.uniform(format!("{name}.wk"), &[d_k, channels], bound)?),
                Some(store.uniform(format!("{name}.wv"), &[channels, channels], bound)?),
            )
        };
        let alpha = store.constant(format!("{name}.alpha"), &[1], alpha_init)?;
        Ok(Self {
            wq,
            wk,
            wv,
            alpha,
            channels,
            d_k,
            max_n,
        })
    }

    pub fn d_k(&self) -> usize {
        self.d_k
    }

    fn project(x: &Tensor, w: &Option<Var>) -> Result<Tensor> {
        Ok(match w {
            Some(w) => x.matmul(&w.as_tensor().t()?)?,
            None => x.clone(),
        })
    }

    /// `(Q, K, V)` as `(N, d_k)`, `(N, d_k)`, `(N, C)`.
    pub fn qkv(&self, e: &Tensor, f: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let ef = flatten_positions(e)?;
        let ff = flatten_positions(f)?;
        Ok((
            Self::project(&ef, &self.wq)?,
            Self::project(&ff, &self.wk)?,
            Self::project(&ff, &self.wv)?,
        ))
    }

    /// The attended term `A·V` before gating, shaped like `E`.
    pub fn attend(&self, e: &Tensor, f: &Tensor, level: usize) -> Result<Tensor> {
        check_channels(e, self.channels, "cross-attention query")?;
        check_channels(f, self.channels, "cross-attention key")?;
        let (_, _, h, w) = e.dims4()?;
        if f.dims4()? != e.dims4()? {
            return Err(Error::Shape(format!(
                "depth {:?} and semantic {:?} grids differ",
                e.shape(),
                f.shape()
            ))
            .at_level(level));
        }
        let n = h * w;
        if n > self.max_n {
            return Err(Error::InvalidInput(format!(
                "{n} attention positions exceed the cap of {} (about {} MiB of weights per level)",
                self.max_n,
                n * n * e.dtype().size_in_bytes() >> 20
            ))
            .at_level(level));
        }
        let (q, k, v) = self.qkv(e, f)?;
        let out = fused_attention(&q, &k, &v, 1.0 / (self.d_k as f64).sqrt()).map_err(|err| match err {
            Error::Tensor(inner) => Error::Numerical {
                level,
                message: inner.to_string(),
            },
            other => other,
        })?;
        unflatten_positions(&out, h, w)
    }

    /// `D*_i = E_i + α · attend(E_i, F_i)`
    pub fn forward(&self, e: &Tensor, f: &Tensor, level: usize) -> Result<Tensor> {
        let attended = self.attend(e, f, level)?;
        Ok((e + attended.broadcast_mul(self.alpha.as_tensor())?)?)
    }

    /// Explicit `N × N` weights `A`, for inspection.
    pub fn weights(&self, e: &Tensor, f: &Tensor) -> Result<Tensor> {
        let (q, k, _) = self.qkv(e, f)?;
        attention_weights(&q, &k, 1.0 / (self.d_k as f64).sqrt())
    }
}

/// Simplified symmetric fusion: concat → 1×1 conv → RCAB, added back onto
/// the semantics-infused depth.
pub struct Fusion {
    pub mix: Conv,
    pub rcab: Rcab,
    channels: usize,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        Ok(Self {
            mix: Conv::new(store, &format!("{name}.mix"), 2 * channels, channels, 1)?,
            rcab: Rcab::new(store, &format!("{name}.rcab"), channels, reduction)?,
            channels,
        })
    }

    pub fn forward(&self, infused: &Tensor, rgb: &Tensor) -> Result<Tensor> {
        check_channels(infused, self.channels, "fusion")?;
        if infused.dims() != rgb.dims() {
            return Err(Error::Shape(format!(
                "fusion inputs {:?} and {:?} differ",
                infused.shape(),
                rgb.shape()
            )));
        }
        let mixed = self.mix.forward(&Tensor::cat(&[infused, rgb], 1)?)?;
        Ok((infused + self.rcab.forward(&mixed)?)?)
    }

    /// Zeroes the mixing conv and the RCAB residual so the block is the identity
    /// on `D*`.
    pub fn zero(&self) -> Result<()> {
        self.mix.zero()?;
        self.rcab.zero_residual()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let mut s = ParamStore::new(DType::F64, seed);
        s.uniform("x", shape, 1.0).unwrap().as_tensor().clone()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn pixel_shuffle_small_case() {
        let x = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, 4.0], (1, 4, 1, 1), &Device::Cpu).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.dims(), &[1, 1, 2, 2]);
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert!(pixel_shuffle(&rand(&[1, 3, 2, 2], 0), 2).is_err());
    }

    #[test]
    fn resize_preserves_constants_and_shape() {
        let x = Tensor::full(0.7f64, (1, 2, 4, 4), &Device::Cpu).unwrap();
        let y = align_tokens(&Tensor::full(0.7f64, (1, 8, 4, 4), &Device::Cpu).unwrap(), 2, (56, 56)).unwrap();
        assert_eq!(y.dims(), &[1, 2, 56, 56]);
        assert!(max_abs_diff(&y, &Tensor::full(0.7f64, (1, 2, 56, 56), &Device::Cpu).unwrap()) < 1e-12);
        assert_eq!(max_abs_diff(&bilinear_resize(&x, 4, 4).unwrap(), &x), 0.0);
    }

    #[test]
    fn projection_identity() {
        let mut s = ParamStore::new(DType::F64, 1);
        let p = Projection::new(&mut s, "p", 8, 2, 2).unwrap();
        p.set_identity().unwrap();
        let t = rand(&[1, 8, 3, 5], 2);
        assert_eq!(max_abs_diff(&p.forward(&t).unwrap(), &t), 0.0);
        let q = Projection::new(&mut s, "q", 6, 2, 2).unwrap();
        assert!(q.set_identity().is_err());
        assert!(q.forward(&t).is_err());
    }

    #[test]
    fn zero_alpha_is_exact_identity() {
        let mut s = ParamStore::new(DType::F64, 3);
        let a = CrossAttention::new(&mut s, "a", 4, 4, false, 0.0, 1000).unwrap();
        let e = rand(&[1, 4, 3, 3], 4);
        let f = rand(&[1, 4, 3, 3], 5);
        let out = a.forward(&e, &f, 1).unwrap();
        assert_eq!(max_abs_diff(&out, &e), 0.0);
    }

    #[test]
    fn attention_rows_are_convex() {
        let mut s = ParamStore::new(DType::F64, 6);
        let a = CrossAttention::new(&mut s, "a", 4, 2, false, 0.5, 1000).unwrap();
        let w = a.weights(&rand(&[1, 4, 2, 3], 7), &rand(&[1, 4, 2, 3], 8)).unwrap();
        for row in w.to_vec2::<f64>().unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn attention_cap_and_shape_errors() {
        let mut s = ParamStore::new(DType::F64, 9);
        let a = CrossAttention::new(&mut s, "a", 4, 4, false, 1.0, 8).unwrap();
        let e = rand(&[1, 4, 3, 3], 10);
        assert!(matches!(a.forward(&e, &e, 2), Err(Error::Level { level: 2, .. })));
        let b = CrossAttention::new(&mut s, "b", 4, 4, false, 1.0, 100).unwrap();
        assert!(b.forward(&e, &rand(&[1, 4, 3, 2], 11), 1).is_err());
        assert!(CrossAttention::new(&mut s, "c", 4, 2, true, 0.0, 100).is_err());
    }

    #[test]
    fn non_finite_logits_report_level() {
        let mut s = ParamStore::new(DType::F64, 12);
        let a = CrossAttention::new(&mut s, "a", 2, 2, true, 1.0, 100).unwrap();
        let e = Tensor::full(f64::MAX, (1, 2, 2, 2), &Device::Cpu).unwrap();
        match a.forward(&e, &e, 3) {
            Err(Error::Numerical { level, .. }) => assert_eq!(level, 3),
            other => panic!("expected numerical error, got {other:?}"),
        }
    }

    #[test]
    fn zeroed_fusion_is_identity() {
        let mut s = ParamStore::new(DType::F64, 13);
        let f = Fusion::new(&mut s, "f", 4, 2).unwrap();
        let d = rand(&[1, 4, 5, 5], 14);
        let r = rand(&[1, 4, 5, 5], 15);
        assert!(max_abs_diff(&f.forward(&d, &r).unwrap(), &d) > 0.0);
        f.zero().unwrap();
        assert_eq!(max_abs_diff(&f.forward(&d, &r).unwrap(), &d), 0.0);
        assert!(f.forward(&d, &rand(&[1, 4, 5, 4], 16)).is_err());
    }
}
