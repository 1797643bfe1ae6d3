//! Gradient-aware reconstruction loss `L = L1 + λ·L_grad` on normalized
//! depth. All functions take `(…, H, W)` tensors and are differentiable.

use std::str::FromStr;

use candle_core::{Tensor, D};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// `L1 + λ·L_grad`
    L1Grad,
    /// Plain L1 (the gradient term is dropped regardless of λ).
    L1,
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1_grad" => Ok(LossKind::L1Grad),
            "l1" => Ok(LossKind::L1),
            _ => Err(Error::Config(format!("unknown loss kind `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub kind: LossKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            kind: LossKind::L1Grad,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("loss lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Forward differences along width and height; the last column of `gx` and
/// the last row of `gy` are zero.
pub fn spatial_gradients(d: &Tensor) -> Result<(Tensor, Tensor)> {
    let rank = d.rank();
    if rank < 2 {
        return Err(Error::Shape(format!("gradients need a 2-D map, got {:?}", d.shape())));
    }
    let (h, w) = (d.dims()[rank - 2], d.dims()[rank - 1]);
    if h < 2 || w < 2 {
        return Err(Error::InvalidInput(format!("map {h}x{w} is smaller than 2x2")));
    }
    let diff = |axis: usize, n: usize| -> Result<Tensor> {
        let fwd = (d.narrow(axis, 1, n - 1)? - d.narrow(axis, 0, n - 1)?)?;
        let pad = d.narrow(axis, 0, 1)?.zeros_like()?;
        Ok(Tensor::cat(&[&fwd, &pad], axis)?)
    };
    Ok((diff(rank - 1, w)?, diff(rank - 2, h)?))
}

fn check_same(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", pred.shape(), gt.shape())));
    }
    Ok(())
}

/// Mean absolute difference over all elements.
pub fn l1_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_same(pred, gt)?;
    Ok((pred - gt)?.abs()?.flatten_all()?.mean(D::Minus1)?)
}

pub fn grad_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_same(pred, gt)?;
    let (px, py) = spatial_gradients(pred)?;
    let (gx, gy) = spatial_gradients(gt)?;
    Ok((l1_loss(&px, &gx)? + l1_loss(&py, &gy)?)?)
}

pub fn total_loss(pred: &Tensor, gt: &Tensor, config: &LossConfig) -> Result<Tensor> {
    let l1 = l1_loss(pred, gt)?;
    match config.kind {
        LossKind::L1 => Ok(l1),
        LossKind::L1Grad if config.lambda == 0.0 => Ok(l1),
        LossKind::L1Grad => Ok((l1 + (grad_loss(pred, gt)? * config.lambda)?)?),
    }
}
