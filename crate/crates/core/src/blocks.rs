//! Convolutional building blocks: residual channel attention blocks for the
//! depth encoder, plain residual blocks for the RGB encoder, and the
//! upsampling head that adds the bicubic skip.
//!
//! All tensors are `(1, C, H, W)`; every 3×3 convolution is zero-padded so
//! spatial dims are preserved.

use candle_core::{Tensor, Var};

use crate::conv::conv2d_same;
use crate::error::{Error, Result};
use crate::params::{zero_var, ParamStore};

/// Which intermediate a feature map is.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Stem features `D_0` of the bicubic-upsampled depth.
    DepthStem,
    /// Encoded depth `E_i`.
    Encoded(usize),
    /// Projected tokens `S_i`.
    Projected(usize),
    /// Aligned semantic features `F_i`.
    Semantic(usize),
    /// Semantics-infused depth `D*_i`.
    Infused(usize),
    /// RGB encoder tap `R*_i`.
    Rgb(usize),
    /// Refined depth `D_i`.
    Refined(usize),
    /// Final prediction `D_hr`.
    Output,
}

/// Activation grid tagged with its role in the pipeline.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub data: Tensor,
    pub role: Role,
}

impl FeatureMap {
    pub fn new(data: Tensor, role: Role) -> Result<Self> {
        let (b, c, h, w) = data.dims4()?;
        if b != 1 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("feature map {:?}", data.shape())));
        }
        Ok(Self { data, role })
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn height(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[3]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub channels: usize,
    pub n_rcab_per_level: usize,
    /// Channel-attention bottleneck ratio.
    pub reduction: usize,
    pub n_levels: usize,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.reduction == 0 || self.channels % self.reduction != 0 {
            return Err(Error::Config(format!(
                "channels {} must be a positive multiple of reduction {}",
                self.channels, self.reduction
            )));
        }
        if self.n_levels != 4 {
            return Err(Error::Config(format!("n_levels must be 4, got {}", self.n_levels)));
        }
        Ok(())
    }
}

pub(crate) fn check_channels(x: &Tensor, expected: usize, what: &str) -> Result<()> {
    let c = x.dims4()?.1;
    if c != expected {
        return Err(Error::Shape(format!("{what} expects {expected} channels, got {c}")));
    }
    Ok(())
}

pub(crate) fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// 2-D convolution with bias, square kernel, stride 1, "same" zero padding.
pub struct Conv {
    pub weight: Var,
    pub bias: Var,
    in_channels: usize,
}

impl Conv {
    pub fn new(store: &mut ParamStore, name: &str, in_c: usize, out_c: usize, kernel: usize) -> Result<Self> {
        let bound = 1.0 / ((in_c * kernel * kernel) as f64).sqrt();
        let weight = store.uniform(format!("{name}.weight"), &[out_c, in_c, kernel, kernel], bound)?;
        let bias = store.uniform(format!("{name}.bias"), &[out_c], bound)?;
        Ok(Self {
            weight,
            bias,
            in_channels: in_c,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_channels(x, self.in_channels, "convolution")?;
        conv2d_same(x, self.weight.as_tensor(), self.bias.as_tensor())
    }

    pub fn zero(&self) -> Result<()> {
        zero_var(&self.weight)?;
        zero_var(&self.bias)
    }
}

/// Fully connected layer on a `(1, in)` row.
struct Dense {
    weight: Var,
    bias: Var,
}

impl Dense {
    fn new(store: &mut ParamStore, name: &str, in_f: usize, out_f: usize) -> Result<Self> {
        let bound = 1.0 / (in_f as f64).sqrt();
        Ok(Self {
            weight: store.uniform(format!("{name}.weight"), &[out_f, in_f], bound)?,
            bias: store.uniform(format!("{name}.bias"), &[out_f], bound)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.as_tensor().t()?)?;
        Ok(y.broadcast_add(&self.bias.as_tensor().unsqueeze(0)?)?)
    }
}

/// `y = x + CA(conv(relu(conv(x))))` with squeeze-and-excitation channel gating.
pub struct Rcab {
    conv1: Conv,
    conv2: Conv,
    squeeze: Dense,
    excite: Dense,
    channels: usize,
}

impl Rcab {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = (channels / reduction).max(1);
        Ok(Self {
            conv1: Conv::new(store, &format!("{name}.conv1"), channels, channels, 3)?,
            conv2: Conv::new(store, &format!("{name}.conv2"), channels, channels, 3)?,
            squeeze: Dense::new(store, &format!("{name}.ca.squeeze"), channels, hidden)?,
            excite: Dense::new(store, &format!("{name}.ca.excite"), hidden, channels)?,
            channels,
        })
    }

    fn body(&self, x: &Tensor) -> Result<Tensor> {
        self.conv2.forward(&self.conv1.forward(x)?.relu()?)
    }

    /// Channel gate in `(0, 1)` for a residual body output, shape `(1, C, 1, 1)`.
    fn gate_of(&self, body: &Tensor) -> Result<Tensor> {
        let pooled = body.mean_keepdim(3)?.mean_keepdim(2)?.flatten_from(1)?;
        let h = self.squeeze.forward(&pooled)?.relu()?;
        let g = sigmoid(&self.excite.forward(&h)?)?;
        Ok(g.reshape((1, self.channels, 1, 1))?)
    }

    /// The channel-attention gate this block applies for input `x`.
    pub fn gate(&self, x: &Tensor) -> Result<Tensor> {
        check_channels(x, self.channels, "RCAB")?;
        self.gate_of(&self.body(x)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_channels(x, self.channels, "RCAB")?;
        let body = self.body(x)?;
        let gated = body.broadcast_mul(&self.gate_of(&body)?)?;
        Ok((x + gated)?)
    }

    /// Zeroes the residual branch so the block becomes the identity.
    pub fn zero_residual(&self) -> Result<()> {
        self.conv2.zero()
    }
}

/// `y = x + conv(relu(conv(x)))`
pub struct ResBlock {
    conv1: Conv,
    conv2: Conv,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv::new(store, &format!("{name}.conv1"), channels, channels, 3)?,
            conv2: Conv::new(store, &format!("{name}.conv2"), channels, channels, 3)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let r = self.conv2.forward(&self.conv1.forward(x)?.relu()?)?;
        Ok((x + r)?)
    }

    pub fn zero_residual(&self) -> Result<()> {
        self.conv2.zero()
    }
}

/// One level of the depth encoder: a chain of RCABs.
pub struct DepthEncoder {
    blocks: Vec<Rcab>,
}

impl DepthEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &BlockConfig) -> Result<Self> {
        let blocks = (0..cfg.n_rcab_per_level)
            .map(|b| Rcab::new(store, &format!("{name}.rcab{b}"), cfg.channels, cfg.reduction))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    /// `E_i` from the previous level's refined features `D_{i-1}`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.blocks.iter().try_fold(x.clone(), |h, b| b.forward(&h))
    }

    pub fn blocks(&self) -> &[Rcab] {
        &self.blocks
    }

    pub fn zero_residual(&self) -> Result<()> {
        self.blocks.iter().try_for_each(Rcab::zero_residual)
    }
}

/// Shared RGB trunk: a stem convolution then residual blocks, tapped after
/// each level.
pub struct RgbEncoder {
    stem: Conv,
    levels: Vec<Vec<ResBlock>>,
}

impl RgbEncoder {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, blocks_per_level: usize, n_levels: usize) -> Result<Self> {
        let stem = Conv::new(store, &format!("{name}.stem"), 3, channels, 3)?;
        let levels = (0..n_levels)
            .map(|l| {
                (0..blocks_per_level)
                    .map(|b| ResBlock::new(store, &format!("{name}.level{}.res{b}", l + 1), channels))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        Ok(Self { stem, levels })
    }

    pub fn stem(&self, rgb: &Tensor) -> Result<Tensor> {
        check_channels(rgb, 3, "RGB encoder")?;
        self.stem.forward(rgb)
    }

    /// Advances the trunk by one level (1-based).
    pub fn level(&self, prev: &Tensor, level: usize) -> Result<Tensor> {
        let blocks = self
            .levels
            .get(level.wrapping_sub(1))
            .ok_or_else(|| Error::InvalidInput(format!("RGB level {level} out of range")))?;
        blocks.iter().try_fold(prev.clone(), |h, b| b.forward(&h))
    }

    /// `R*_1..R*_n`
    pub fn forward_all(&self, rgb: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = self.stem(rgb)?;
        let mut taps = Vec::with_capacity(self.levels.len());
        for l in 1..=self.levels.len() {
            h = self.level(&h, l)?;
            taps.push(h.clone());
        }
        Ok(taps)
    }

    /// `R*_level` alone.
    pub fn encode(&self, rgb: &Tensor, level: usize) -> Result<Tensor> {
        if level == 0 || level > self.levels.len() {
            return Err(Error::InvalidInput(format!("RGB level {level} out of range")));
        }
        let mut h = self.stem(rgb)?;
        for l in 1..=level {
            h = self.level(&h, l)?;
        }
        Ok(h)
    }

    pub fn zero_residual(&self) -> Result<()> {
        self.levels
            .iter()
            .flatten()
            .try_for_each(ResBlock::zero_residual)
    }
}

/// `φ`: conv → RCAB×k → conv to one channel, at the working (HR) grid.
pub struct UpsampleHead {
    conv_in: Conv,
    blocks: Vec<Rcab>,
    conv_out: Conv,
}

impl UpsampleHead {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &BlockConfig, n_blocks: usize) -> Result<Self> {
        Ok(Self {
            conv_in: Conv::new(store, &format!("{name}.conv_in"), cfg.channels, cfg.channels, 3)?,
            blocks: (0..n_blocks)
                .map(|b| Rcab::new(store, &format!("{name}.rcab{b}"), cfg.channels, cfg.reduction))
                .collect::<Result<_>>()?,
            conv_out: Conv::new(store, &format!("{name}.conv_out"), cfg.channels, 1, 3)?,
        })
    }

    /// `φ(D_4)`
    pub fn residual(&self, d4: &Tensor) -> Result<Tensor> {
        let h = self.conv_in.forward(d4)?;
        let h = self.blocks.iter().try_fold(h, |h, b| b.forward(&h))?;
        self.conv_out.forward(&h)
    }

    /// `D_hr = φ(D_4) + D_lr↑`; `skip` is the bicubic-upsampled LR depth.
    pub fn forward(&self, d4: &Tensor, skip: &Tensor) -> Result<Tensor> {
        let r = self.residual(d4)?;
        if r.dims() != skip.dims() {
            return Err(Error::Shape(format!(
                "head output {:?} vs bicubic skip {:?}",
                r.shape(),
                skip.shape()
            )));
        }
        Ok((r + skip)?)
    }

    /// Zeroes the final projection so `φ ≡ 0`.
    pub fn zero_residual(&self) -> Result<()> {
        self.conv_out.zero()?;
        self.blocks.iter().try_for_each(Rcab::zero_residual)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    fn input(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut s = ParamStore::new(DType::F64, seed);
        s.uniform("x", &[1, c, h, w], 1.0).unwrap().as_tensor().clone()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn rcab_identity_when_residual_zero() {
        let mut s = ParamStore::new(DType::F64, 1);
        let b = Rcab::new(&mut s, "b", 8, 4).unwrap();
        b.zero_residual().unwrap();
        let x = input(8, 5, 7, 2);
        assert_eq!(max_abs_diff(&b.forward(&x).unwrap(), &x), 0.0);
    }

    #[test]
    fn rcab_shape_and_gate_range() {
        let mut s = ParamStore::new(DType::F64, 3);
        let b = Rcab::new(&mut s, "b", 16, 4).unwrap();
        for (h, w) in [(1, 1), (4, 9), (13, 6)] {
            let x = input(16, h, w, 4);
            assert_eq!(b.forward(&x).unwrap().dims(), x.dims());
            let g = b.gate(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert!(g.iter().all(|&v| v > 0.0 && v < 1.0));
        }
        assert!(b.forward(&input(8, 4, 4, 0)).is_err());
    }

    #[test]
    fn encoders_preserve_shape() {
        let cfg = BlockConfig { channels: 8, n_rcab_per_level: 2, reduction: 4, n_levels: 4 };
        let mut s = ParamStore::new(DType::F64, 5);
        let enc = DepthEncoder::new(&mut s, "e", &cfg).unwrap();
        let mut h = input(8, 6, 10, 1);
        for _ in 0..4 {
            h = enc.forward(&h).unwrap();
            assert_eq!(h.dims(), &[1, 8, 6, 10]);
        }
        enc.zero_residual().unwrap();
        let x = input(8, 6, 10, 9);
        assert_eq!(max_abs_diff(&enc.forward(&x).unwrap(), &x), 0.0);
    }

    #[test]
    fn rgb_levels_are_distinct_and_zero_passes_stem() {
        let mut s = ParamStore::new(DType::F64, 6);
        let rgb_enc = RgbEncoder::new(&mut s, "rgb", 8, 1, 4).unwrap();
        let rgb = input(3, 9, 11, 7);
        let taps = rgb_enc.forward_all(&rgb).unwrap();
        assert_eq!(taps.len(), 4);
        for t in &taps {
            assert_eq!(t.dims(), &[1, 8, 9, 11]);
        }
        assert!(max_abs_diff(&taps[0], &taps[1]) > 1e-6);
        assert_eq!(max_abs_diff(&rgb_enc.encode(&rgb, 3).unwrap(), &taps[2]), 0.0);
        assert!(rgb_enc.encode(&rgb, 5).is_err());

        rgb_enc.zero_residual().unwrap();
        let stem = rgb_enc.stem(&rgb).unwrap();
        for t in rgb_enc.forward_all(&rgb).unwrap() {
            assert_eq!(max_abs_diff(&t, &stem), 0.0);
        }
    }

    #[test]
    fn head_skip_identity() {
        let cfg = BlockConfig { channels: 8, n_rcab_per_level: 1, reduction: 4, n_levels: 4 };
        let mut s = ParamStore::new(DType::F64, 8);
        let head = UpsampleHead::new(&mut s, "phi", &cfg, 2).unwrap();
        let d4 = input(8, 56, 56, 1);
        let skip = input(1, 56, 56, 2);
        let out = head.forward(&d4, &skip).unwrap();
        assert_eq!(out.dims(), &[1, 1, 56, 56]);
        assert!(max_abs_diff(&out, &skip) > 0.0);
        head.zero_residual().unwrap();
        assert_eq!(max_abs_diff(&head.forward(&d4, &skip).unwrap(), &skip), 0.0);
        assert!(head.forward(&d4, &input(1, 28, 28, 3)).is_err());
    }

    #[test]
    fn block_config_validation() {
        let ok = BlockConfig { channels: 64, n_rcab_per_level: 4, reduction: 16, n_levels: 4 };
        assert!(ok.validate().is_ok());
        assert!(BlockConfig { reduction: 5, ..ok }.validate().is_err());
        assert!(BlockConfig { n_levels: 3, ..ok }.validate().is_err());
    }
}
