//! RGB-D samples, degradation, normalization and patch cropping.

pub mod io;
pub mod resample;
pub mod synth;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::Grid;

pub use resample::{bicubic_downsample, bicubic_upsample};
pub use synth::generate_synthetic_dataset;

/// ImageNet channel statistics used to standardize RGB input.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Side length of a semantic-encoder patch; HR inputs must be multiples of it.
pub const PATCH_MULTIPLE: usize = 14;

/// One training/evaluation record: HR guide, HR ground truth, LR input.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    /// `3 × H × W`
    pub rgb: Grid,
    /// `1 × H × W`, meters unless normalized.
    pub depth_gt: Grid,
    /// `1 × H/s × W/s`
    pub depth_lr: Grid,
    pub scale: usize,
}

impl SamplePair {
    pub fn new(
        id: impl Into<String>,
        rgb: Grid,
        depth_gt: Grid,
        depth_lr: Grid,
        scale: usize,
    ) -> Result<Self> {
        if rgb.channels() != 3 || depth_gt.channels() != 1 || depth_lr.channels() != 1 {
            return Err(Error::Shape(format!(
                "expected 3-channel rgb and 1-channel depth, got {}, {}, {}",
                rgb.channels(),
                depth_gt.channels(),
                depth_lr.channels()
            )));
        }
        if rgb.dims() != depth_gt.dims() {
            return Err(Error::Shape(format!(
                "rgb {:?} and depth {:?} differ",
                rgb.dims(),
                depth_gt.dims()
            )));
        }
        let (h, w) = depth_gt.dims();
        if scale == 0 || h % scale != 0 || w % scale != 0 {
            return Err(Error::InvalidInput(format!(
                "{h}x{w} is not divisible by scale {scale}"
            )));
        }
        if depth_lr.dims() != (h / scale, w / scale) {
            return Err(Error::Shape(format!(
                "LR depth {:?} should be {:?}",
                depth_lr.dims(),
                (h / scale, w / scale)
            )));
        }
        if !depth_gt.data().iter().all(|v| v.is_finite() && *v >= 0.0) || !depth_lr.is_finite() {
            return Err(Error::InvalidInput(
                "depth must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            id: id.into(),
            rgb,
            depth_gt,
            depth_lr,
            scale,
        })
    }

    /// Builds a pair whose LR input is the bicubic degradation of `depth_gt`.
    pub fn from_hr(id: impl Into<String>, rgb: Grid, depth_gt: Grid, scale: usize) -> Result<Self> {
        let lr = bicubic_downsample(&depth_gt, scale)?;
        Self::new(id, rgb, depth_gt, lr, scale)
    }

    pub fn hr_dims(&self) -> (usize, usize) {
        self.depth_gt.dims()
    }
}

/// Affine maps between raw and network units for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizationState {
    pub depth_min: f64,
    pub depth_max: f64,
    pub rgb_mean: [f64; 3],
    pub rgb_std: [f64; 3],
}

impl NormalizationState {
    pub fn new(depth_min: f64, depth_max: f64, rgb_mean: [f64; 3], rgb_std: [f64; 3]) -> Result<Self> {
        let state = Self {
            depth_min,
            depth_max,
            rgb_mean,
            rgb_std,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn imagenet(depth_min: f64, depth_max: f64) -> Result<Self> {
        Self::new(depth_min, depth_max, IMAGENET_MEAN, IMAGENET_STD)
    }

    /// Depth range from the ground truth (training time).
    pub fn for_training(sample: &SamplePair) -> Result<Self> {
        let (lo, hi) = sample.depth_gt.min_max();
        Self::imagenet(lo, hi)
    }

    /// Depth range from the LR input only (inference time, GT unavailable).
    pub fn for_inference(sample: &SamplePair) -> Result<Self> {
        let (lo, hi) = sample.depth_lr.min_max();
        Self::imagenet(lo, hi)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.depth_max > self.depth_min) {
            return Err(Error::DegenerateRange {
                min: self.depth_min,
                max: self.depth_max,
            });
        }
        if self.rgb_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "rgb std must be positive: {:?}",
                self.rgb_std
            )));
        }
        Ok(())
    }

    fn depth_span(&self) -> f64 {
        self.depth_max - self.depth_min
    }

    pub fn normalize_depth(&self, depth: &Grid) -> Grid {
        let span = self.depth_span();
        depth.map(|d| ((d - self.depth_min) / span).clamp(0.0, 1.0))
    }

    pub fn denormalize_depth(&self, depth: &Grid) -> Grid {
        let span = self.depth_span();
        depth.map(|d| d * span + self.depth_min)
    }

    pub fn normalize_rgb(&self, rgb: &Grid) -> Grid {
        Grid::from_fn(3, rgb.height(), rgb.width(), |c, y, x| {
            (rgb.get(c, y, x) - self.rgb_mean[c]) / self.rgb_std[c]
        })
    }

    pub fn denormalize_rgb(&self, rgb: &Grid) -> Grid {
        Grid::from_fn(3, rgb.height(), rgb.width(), |c, y, x| {
            rgb.get(c, y, x) * self.rgb_std[c] + self.rgb_mean[c]
        })
    }
}

/// Standardizes RGB and min-max scales both depth maps into `[0, 1]`.
pub fn normalize_sample(sample: &SamplePair, state: &NormalizationState) -> Result<SamplePair> {
    state.validate()?;
    Ok(SamplePair {
        id: sample.id.clone(),
        rgb: state.normalize_rgb(&sample.rgb),
        depth_gt: state.normalize_depth(&sample.depth_gt),
        depth_lr: state.normalize_depth(&sample.depth_lr),
        scale: sample.scale,
    })
}

pub fn denormalize_sample(sample: &SamplePair, state: &NormalizationState) -> SamplePair {
    SamplePair {
        id: sample.id.clone(),
        rgb: state.denormalize_rgb(&sample.rgb),
        depth_gt: state.denormalize_depth(&sample.depth_gt),
        depth_lr: state.denormalize_depth(&sample.depth_lr),
        scale: sample.scale,
    }
}

/// Training patch side length used for a given scale factor.
pub fn default_patch_size(scale: usize) -> usize {
    if scale == 4 {
        420
    } else {
        448
    }
}

/// Top-left HR offset of a `patch × patch` crop, aligned to the scale factor.
pub fn crop_offsets(hr_dims: (usize, usize), patch: usize, scale: usize, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = hr_dims;
    let oy = rng.random_range(0..=(h - patch) / scale) * scale;
    let ox = rng.random_range(0..=(w - patch) / scale) * scale;
    (oy, ox)
}

/// Random aligned crop; the LR crop covers exactly the same scene region.
pub fn crop_training_patch(sample: &SamplePair, patch: usize, seed: u64) -> Result<SamplePair> {
    let s = sample.scale;
    let (h, w) = sample.hr_dims();
    if patch == 0 || patch % s != 0 {
        return Err(Error::InvalidInput(format!(
            "patch size {patch} is not a positive multiple of scale {s}"
        )));
    }
    if h < patch || w < patch {
        return Err(Error::InvalidInput(format!(
            "sample `{}` is {h}x{w}, smaller than patch {patch}",
            sample.id
        )));
    }
    let (oy, ox) = crop_offsets((h, w), patch, s, seed);
    Ok(SamplePair {
        id: sample.id.clone(),
        rgb: sample.rgb.crop(oy, ox, patch, patch)?,
        depth_gt: sample.depth_gt.crop(oy, ox, patch, patch)?,
        depth_lr: sample.depth_lr.crop(oy / s, ox / s, patch / s, patch / s)?,
        scale: s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize, s: usize) -> SamplePair {
        let rgb = Grid::from_fn(3, h, w, |c, y, x| ((c + y * 3 + x * 5) % 11) as f64 / 10.0);
        let d = Grid::from_fn(1, h, w, |_, y, x| 1.0 + (y as f64 * 0.1).sin() + x as f64 * 0.02);
        SamplePair::from_hr("s", rgb, d, s).unwrap()
    }

    #[test]
    fn normalize_extremes() {
        let s = sample(8, 8, 2);
        let state = NormalizationState::imagenet(0.5, 3.0).unwrap();
        let flat = SamplePair {
            depth_gt: Grid::filled(1, 8, 8, 0.5),
            depth_lr: Grid::filled(1, 4, 4, 0.5),
            rgb: Grid::from_fn(3, 8, 8, |c, _, _| IMAGENET_MEAN[c]),
            ..s
        };
        let n = normalize_sample(&flat, &state).unwrap();
        assert!(n.depth_gt.data().iter().all(|&v| v == 0.0));
        assert!(n.depth_lr.data().iter().all(|&v| v == 0.0));
        assert!(n.rgb.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_range_rejected() {
        assert!(matches!(
            NormalizationState::imagenet(2.0, 2.0),
            Err(Error::DegenerateRange { .. })
        ));
        assert!(NormalizationState::new(0.0, 1.0, IMAGENET_MEAN, [0.2, 0.0, 0.2]).is_err());
    }

    #[test]
    fn round_trip_within_range() {
        let s = sample(16, 16, 4);
        let (lo, hi) = s.depth_gt.min_max();
        let (llo, lhi) = s.depth_lr.min_max();
        let state = NormalizationState::imagenet(lo.min(llo), hi.max(lhi)).unwrap();
        let back = denormalize_sample(&normalize_sample(&s, &state).unwrap(), &state);
        for (a, b) in back
            .depth_gt
            .data()
            .iter()
            .chain(back.depth_lr.data())
            .chain(back.rgb.data())
            .zip(s.depth_gt.data().iter().chain(s.depth_lr.data()).chain(s.rgb.data()))
        {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn crop_identity_and_determinism() {
        let s = sample(28, 28, 4);
        assert_eq!(crop_training_patch(&s, 28, 9).unwrap(), s);
        let a = crop_training_patch(&sample(56, 84, 4), 28, 3).unwrap();
        let b = crop_training_patch(&sample(56, 84, 4), 28, 3).unwrap();
        assert_eq!(a, b);
        assert!(crop_training_patch(&s, 32, 0).is_err());
        assert!(crop_training_patch(&s, 30, 0).is_err());
    }

    #[test]
    fn crop_offsets_aligned_over_many_seeds() {
        for s in [4usize, 8, 16] {
            for seed in 0..500u64 {
                let (oy, ox) = crop_offsets((448 + 5 * 16, 448 + 3 * 16), 448, s, seed);
                assert_eq!(oy % s, 0);
                assert_eq!(ox % s, 0);
                assert!(oy + 448 <= 528 && ox + 448 <= 496);
            }
        }
    }

    #[test]
    fn cropped_lr_matches_cropped_hr_region() {
        let s = sample(56, 56, 4);
        let c = crop_training_patch(&s, 28, 17).unwrap();
        assert_eq!(c.depth_lr.dims(), (7, 7));
        assert_eq!(c.rgb.dims(), (28, 28));
        // every LR value of the crop appears at an aligned location of the source LR
        let (oy, ox) = crop_offsets((56, 56), 28, 4, 17);
        assert_eq!(c.depth_lr.get(0, 0, 0), s.depth_lr.get(0, oy / 4, ox / 4));
    }

    #[test]
    fn default_patch_sizes_fit_patch_grid() {
        assert_eq!(default_patch_size(4), 420);
        assert_eq!(default_patch_size(8), 448);
        assert_eq!(default_patch_size(16), 448);
        for s in [4, 8, 16] {
            let p = default_patch_size(s);
            assert_eq!(p % PATCH_MULTIPLE, 0);
            assert_eq!(p % s, 0);
        }
    }
}
