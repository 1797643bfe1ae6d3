//! Separable resampling with half-pixel-centred sample positions.
//!
//! Depth degradation and the bicubic skip connection use a Catmull-Rom cubic
//! (`a = -0.5`) with reflect padding. When shrinking, the kernel is stretched
//! by the reduction factor (antialiased resampling, as in MATLAB `imresize`)
//! so a constant map stays constant and high frequencies are attenuated.

use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Filter {
    /// Keys cubic convolution with free parameter `a`.
    Cubic { a: f64 },
    Linear,
}

impl Filter {
    fn support(self) -> f64 {
        match self {
            Filter::Cubic { .. } => 2.0,
            Filter::Linear => 1.0,
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        let x = x.abs();
        match self {
            Filter::Cubic { a } => {
                if x <= 1.0 {
                    ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
                } else if x < 2.0 {
                    ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
                } else {
                    0.0
                }
            }
            Filter::Linear => (1.0 - x).max(0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Border {
    /// Mirror about the edge sample without repeating it (`-1 -> 1`).
    Reflect,
    /// Replicate the edge sample.
    Clamp,
}

impl Border {
    pub fn index(self, j: i64, n: usize) -> usize {
        let n = n as i64;
        match self {
            Border::Clamp => j.clamp(0, n - 1) as usize,
            Border::Reflect => {
                if n == 1 {
                    return 0;
                }
                let period = 2 * (n - 1);
                let j = j.rem_euclid(period);
                (if j >= n { period - j } else { j }) as usize
            }
        }
    }
}

/// Per-output-sample taps along one axis.
#[derive(Clone, Debug)]
pub struct AxisWeights {
    taps: Vec<Vec<(usize, f64)>>,
    in_len: usize,
}

impl AxisWeights {
    pub fn out_len(&self) -> usize {
        self.taps.len()
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn taps(&self, i: usize) -> &[(usize, f64)] {
        &self.taps[i]
    }

    /// Dense `out_len × in_len` row-major matrix.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.out_len() * self.in_len];
        for (i, taps) in self.taps.iter().enumerate() {
            for &(j, w) in taps {
                m[i * self.in_len + j] += w;
            }
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Resampler {
    pub filter: Filter,
    pub border: Border,
    pub antialias: bool,
}

/// Catmull-Rom, reflect padding, antialiased when shrinking.
pub const BICUBIC: Resampler = Resampler {
    filter: Filter::Cubic { a: -0.5 },
    border: Border::Reflect,
    antialias: true,
};

/// Bilinear with edge clamping and no antialiasing.
pub const BILINEAR: Resampler = Resampler {
    filter: Filter::Linear,
    border: Border::Clamp,
    antialias: false,
};

impl Resampler {
    pub fn axis_weights(&self, in_len: usize, out_len: usize) -> AxisWeights {
        let ratio = in_len as f64 / out_len as f64;
        let stretch = if self.antialias && ratio > 1.0 { ratio } else { 1.0 };
        let support = self.filter.support() * stretch;
        let taps = (0..out_len)
            .map(|i| {
                let center = (i as f64 + 0.5) * ratio - 0.5;
                let lo = (center - support).floor() as i64;
                let hi = (center + support).ceil() as i64;
                let mut taps: Vec<(usize, f64)> = Vec::new();
                let mut total = 0.0;
                for j in lo..=hi {
                    let w = self.filter.eval((j as f64 - center) / stretch);
                    if w == 0.0 {
                        continue;
                    }
                    total += w;
                    let idx = self.border.index(j, in_len);
                    match taps.iter_mut().find(|(k, _)| *k == idx) {
                        Some(t) => t.1 += w,
                        None => taps.push((idx, w)),
                    }
                }
                for t in &mut taps {
                    t.1 /= total;
                }
                taps
            })
            .collect();
        AxisWeights { taps, in_len }
    }

    /// Resizes every channel to `height × width`, width axis first.
    pub fn resize(&self, src: &Grid, height: usize, width: usize) -> Grid {
        let (sh, sw) = src.dims();
        let wx = self.axis_weights(sw, width);
        let wy = self.axis_weights(sh, height);
        let mut out = Grid::zeros(src.channels(), height, width);
        let mut rows = vec![0.0; sh * width];
        for c in 0..src.channels() {
            let plane = src.plane(c);
            for y in 0..sh {
                let row = &plane[y * sw..(y + 1) * sw];
                for x in 0..width {
                    rows[y * width + x] = wx.taps(x).iter().map(|&(j, w)| row[j] * w).sum();
                }
            }
            let dst = out.plane_mut(c);
            for y in 0..height {
                for x in 0..width {
                    dst[y * width + x] = wy
                        .taps(y)
                        .iter()
                        .map(|&(j, w)| rows[j * width + x] * w)
                        .sum();
                }
            }
        }
        out
    }
}

fn check_scale(scale: usize) -> Result<()> {
    if scale < 2 {
        return Err(Error::InvalidInput(format!("scale must be >= 2, got {scale}")));
    }
    Ok(())
}

/// Degrades an HR map to `H/s × W/s`.
pub fn bicubic_downsample(map: &Grid, scale: usize) -> Result<Grid> {
    check_scale(scale)?;
    let (h, w) = map.dims();
    if h % scale != 0 || w % scale != 0 {
        return Err(Error::InvalidInput(format!(
            "{h}x{w} map is not divisible by scale {scale}"
        )));
    }
    Ok(BICUBIC.resize(map, h / scale, w / scale))
}

pub fn bicubic_upsample(map: &Grid, scale: usize) -> Result<Grid> {
    check_scale(scale)?;
    let (h, w) = map.dims();
    Ok(BICUBIC.resize(map, h * scale, w * scale))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catmull_rom_kernel_values() {
        let k = Filter::Cubic { a: -0.5 };
        assert_eq!(k.eval(0.0), 1.0);
        assert_eq!(k.eval(1.0), 0.0);
        assert_eq!(k.eval(2.0), 0.0);
        // 0.5 offset: (1.5*0.125 - 2.5*0.25 + 1) = 0.5625, outer lobe -0.0625
        assert!((k.eval(0.5) - 0.5625).abs() < 1e-15);
        assert!((k.eval(1.5) + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn reflect_indices() {
        let b = Border::Reflect;
        let got: Vec<usize> = (-3..8).map(|j| b.index(j, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(b.index(-7, 1), 0);
        assert_eq!(Border::Clamp.index(-2, 4), 0);
        assert_eq!(Border::Clamp.index(9, 4), 3);
    }

    #[test]
    fn constant_map_is_preserved() {
        let g = Grid::filled(1, 16, 32, 2.75);
        for s in [2, 4, 8, 16] {
            let d = bicubic_downsample(&g, s).unwrap();
            assert!(d.data().iter().all(|&v| (v - 2.75).abs() < 1e-12));
            let u = bicubic_upsample(&d, s).unwrap();
            assert_eq!(u.dims(), (16, 32));
            assert!(u.data().iter().all(|&v| (v - 2.75).abs() < 1e-12));
        }
    }

    #[test]
    fn indivisible_dims_rejected() {
        let g = Grid::zeros(1, 7, 8);
        assert!(matches!(
            bicubic_downsample(&g, 2),
            Err(Error::InvalidInput(_))
        ));
        assert!(bicubic_upsample(&g, 1).is_err());
    }

    #[test]
    fn identity_resize() {
        let g = Grid::from_fn(2, 5, 6, |c, y, x| (c * 31 + y * 7 + x) as f64 * 0.37);
        assert_eq!(BICUBIC.resize(&g, 5, 6), g);
        assert_eq!(BILINEAR.resize(&g, 5, 6), g);
    }

    #[test]
    fn weights_sum_to_one() {
        for (i, o) in [(4, 16), (16, 4), (37, 4), (3, 7)] {
            let w = BICUBIC.axis_weights(i, o);
            for k in 0..o {
                let s: f64 = w.taps(k).iter().map(|t| t.1).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
