//! Inference protocol (normalize, pad to the patch multiple, predict, crop,
//! denormalize) and RMSE scoring in centimeters.

mod render;

use std::path::{Path, PathBuf};

use crate::config::Variant;
use crate::data::resample::bicubic_upsample;
use crate::data::{normalize_sample, NormalizationState, SamplePair, PATCH_MULTIPLE};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::gta::NaimaModel;
use crate::tokens::N_TOKEN_LEVELS;

pub use render::{annotation_text, ramp_color, write_channel_mean, write_error_map};

pub fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Zero rows/columns appended at the bottom and right of the HR grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PadRecord {
    pub pad_h: usize,
    pub pad_w: usize,
}

impl PadRecord {
    pub fn is_zero(&self) -> bool {
        self.pad_h == 0 && self.pad_w == 0
    }
}

/// Integer ratio between HR and LR dims.
pub fn infer_scale(rgb: &Grid, d_lr: &Grid) -> Result<usize> {
    let (h, w) = rgb.dims();
    let (lh, lw) = d_lr.dims();
    if lh == 0 || lw == 0 || h % lh != 0 || w % lw != 0 || h / lh != w / lw {
        return Err(Error::InvalidInput(format!(
            "rgb {h}x{w} is not an integer multiple of LR depth {lh}x{lw}"
        )));
    }
    Ok(h / lh)
}

/// Next HR dims that are multiples of both `multiple` and the scale.
pub fn padded_dims(dims: (usize, usize), multiple: usize, scale: usize) -> Result<(usize, usize)> {
    if multiple == 0 || scale == 0 {
        return Err(Error::InvalidInput("multiple and scale must be positive".into()));
    }
    let unit = lcm(multiple, scale);
    Ok((dims.0.div_ceil(unit) * unit, dims.1.div_ceil(unit) * unit))
}

/// Zero-pads `rgb` and `d_lr` at the bottom right so the HR dims become
/// multiples of `multiple` that the scale also divides.
pub fn pad_to_multiple(rgb: &Grid, d_lr: &Grid, multiple: usize) -> Result<(Grid, Grid, PadRecord)> {
    let s = infer_scale(rgb, d_lr)?;
    let (h, w) = rgb.dims();
    let (ph, pw) = padded_dims((h, w), multiple, s)?;
    let rec = PadRecord {
        pad_h: ph - h,
        pad_w: pw - w,
    };
    Ok((
        rgb.pad_bottom_right(rec.pad_h, rec.pad_w),
        d_lr.pad_bottom_right(rec.pad_h / s, rec.pad_w / s),
        rec,
    ))
}

/// Top-left `dims` region of a (padded) prediction.
pub fn crop_back(pred: &Grid, dims: (usize, usize)) -> Result<Grid> {
    pred.crop(0, 0, dims.0, dims.1)
}

/// `100 · sqrt(mean((pred − gt)²))` for maps in meters.
pub fn rmse_cm(pred: &Grid, gt: &Grid) -> Result<f64> {
    if pred.channels() != gt.channels() || pred.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "prediction {}x{:?} vs target {}x{:?}",
            pred.channels(),
            pred.dims(),
            gt.channels(),
            gt.dims()
        )));
    }
    let n = pred.data().len();
    if n == 0 {
        return Err(Error::InvalidInput("cannot score an empty map".into()));
    }
    let sq: f64 = pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(100.0 * (sq / n as f64).sqrt())
}

/// Anything that maps normalized `(rgb, d_lr)` to a normalized HR depth.
pub trait DepthPredictor {
    fn predict(&self, rgb: &Grid, d_lr: &Grid) -> Result<Grid>;

    /// Scale factor the predictor serves.
    fn scale(&self) -> usize;
}

impl DepthPredictor for NaimaModel {
    fn predict(&self, rgb: &Grid, d_lr: &Grid) -> Result<Grid> {
        NaimaModel::predict(self, rgb, d_lr)
    }

    fn scale(&self) -> usize {
        self.config().scale
    }
}

/// Plain bicubic upsampling run through the same protocol.
#[derive(Clone, Copy, Debug)]
pub struct BicubicBaseline {
    pub scale: usize,
}

impl DepthPredictor for BicubicBaseline {
    fn predict(&self, _rgb: &Grid, d_lr: &Grid) -> Result<Grid> {
        bicubic_upsample(d_lr, self.scale)
    }

    fn scale(&self) -> usize {
        self.scale
    }
}

/// Normalized, padded inputs for one sample plus what is needed to undo it.
pub struct PreparedInput {
    pub rgb: Grid,
    pub d_lr: Grid,
    pub state: NormalizationState,
    pub pad: PadRecord,
    pub original_dims: (usize, usize),
}

pub fn prepare_inference_input(sample: &SamplePair) -> Result<PreparedInput> {
    let state = NormalizationState::for_inference(sample)?;
    let norm = normalize_sample(sample, &state)?;
    let (rgb, d_lr, pad) = pad_to_multiple(&norm.rgb, &norm.depth_lr, PATCH_MULTIPLE)?;
    Ok(PreparedInput {
        rgb,
        d_lr,
        state,
        pad,
        original_dims: sample.hr_dims(),
    })
}

/// Metric-space HR prediction for one raw sample.
pub fn predict_sample<P: DepthPredictor + ?Sized>(predictor: &P, sample: &SamplePair) -> Result<Grid> {
    let input = prepare_inference_input(sample)?;
    let pred = predictor.predict(&input.rgb, &input.d_lr)?;
    let cropped = crop_back(&pred, input.original_dims)?;
    Ok(input.state.denormalize_depth(&cropped))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_sample: Vec<(String, f64)>,
    /// Unweighted mean of the per-sample RMSEs.
    pub aggregate_rmse_cm: f64,
    pub scale: usize,
    pub pads: Vec<PadRecord>,
}

impl EvalReport {
    pub fn padded(&self) -> bool {
        self.pads.iter().any(|p| !p.is_zero())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,rmse_cm\n");
        for (id, r) in &self.per_sample {
            out.push_str(&format!("{id},{r}\n"));
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "samples={} scale={} padded={} mean_rmse_cm={}",
            self.per_sample.len(),
            self.scale,
            self.padded(),
            self.aggregate_rmse_cm
        )
    }
}

/// Scores every sample in dataset order.
pub fn evaluate_with<P: DepthPredictor + ?Sized>(predictor: &P, dataset: &[SamplePair]) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("evaluation set is empty".into()));
    }
    let scale = predictor.scale();
    let mut per_sample = Vec::with_capacity(dataset.len());
    let mut pads = Vec::with_capacity(dataset.len());
    for sample in dataset {
        let one = || -> Result<(f64, PadRecord)> {
            if sample.scale != scale {
                return Err(Error::Incompatible(format!(
                    "sample scale {} differs from model scale {scale}",
                    sample.scale
                )));
            }
            let input = prepare_inference_input(sample)?;
            let pred = predictor.predict(&input.rgb, &input.d_lr)?;
            let metric = input.state.denormalize_depth(&crop_back(&pred, input.original_dims)?);
            Ok((rmse_cm(&metric, &sample.depth_gt)?, input.pad))
        };
        let (r, pad) = one().map_err(|e| e.for_sample(&sample.id))?;
        per_sample.push((sample.id.clone(), r));
        pads.push(pad);
    }
    let aggregate_rmse_cm = per_sample.iter().map(|(_, r)| r).sum::<f64>() / per_sample.len() as f64;
    Ok(EvalReport {
        per_sample,
        aggregate_rmse_cm,
        scale,
        pads,
    })
}

pub fn evaluate(model: &NaimaModel, dataset: &[SamplePair]) -> Result<EvalReport> {
    evaluate_with(model, dataset)
}

/// Writes `<dir>/<id>_error.png` for one sample and returns its RMSE.
pub fn emit_error_map<P: DepthPredictor + ?Sized>(predictor: &P, sample: &SamplePair, dir: &Path) -> Result<(PathBuf, f64)> {
    let pred = predict_sample(predictor, sample)?;
    let r = rmse_cm(&pred, &sample.depth_gt)?;
    let path = dir.join(format!("{}_error.png", sample.id));
    write_error_map(&path, &pred, &sample.depth_gt, r)?;
    Ok((path, r))
}

/// Channel-mean images of the RGB features `R*_i` and the refined depth
/// features `D_i` for every level: `<prefix>_rgb_level{i}.png` and
/// `<prefix>_depth_level{i}.png`.
pub fn emit_feature_maps(model: &NaimaModel, sample: &SamplePair, prefix: &Path) -> Result<Vec<PathBuf>> {
    let input = prepare_inference_input(sample)?;
    let tokens = model.extract_tokens(&input.rgb)?;
    let trace = model.forward_traced(&input.rgb, &input.d_lr, &tokens, model.variant())?;
    let stem = prefix.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let dir = prefix.parent().unwrap_or(Path::new("."));
    let mut paths = Vec::with_capacity(2 * N_TOKEN_LEVELS);
    for (kind, pick) in [("rgb", 0usize), ("depth", 1)] {
        for (i, level) in trace.levels.iter().enumerate() {
            let t = if pick == 0 { &level.rgb } else { &level.refined };
            let path = dir.join(format!("{stem}_{kind}_level{}.png", i + 1));
            write_channel_mean(&path, &Grid::from_tensor(t)?)?;
            paths.push(path);
        }
    }
    Ok(paths)
}

/// Evaluates both variants of one set of weights, e.g. to compare the
/// cross-attention and addition paths.
pub fn evaluate_variant(model: &NaimaModel, dataset: &[SamplePair], variant: Variant) -> Result<EvalReport> {
    struct Fixed<'a>(&'a NaimaModel, Variant);
    impl DepthPredictor for Fixed<'_> {
        fn predict(&self, rgb: &Grid, d_lr: &Grid) -> Result<Grid> {
            let tokens = self.0.extract_tokens(rgb)?;
            Grid::from_tensor(&self.0.forward_with_tokens(rgb, d_lr, &tokens, self.1)?)
        }
        fn scale(&self) -> usize {
            self.0.config().scale
        }
    }
    evaluate_with(&Fixed(model, variant), dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding_arithmetic() {
        let rgb = Grid::zeros(3, 449, 577);
        let lr = Grid::zeros(1, 449, 577);
        let (p, l, rec) = pad_to_multiple(&rgb, &lr, 14).unwrap();
        assert_eq!(p.dims(), (462, 588));
        assert_eq!(l.dims(), (462, 588));
        assert_eq!(rec, PadRecord { pad_h: 13, pad_w: 11 });
        assert_eq!(crop_back(&l, (449, 577)).unwrap().dims(), (449, 577));
        assert_eq!(padded_dims((56, 70), 14, 4).unwrap(), (56, 84));
        assert_eq!(padded_dims((56, 56), 14, 4).unwrap(), (56, 56));
    }

    #[test]
    fn rmse_constant_offset() {
        let a = Grid::filled(1, 4, 4, 1.0);
        let b = Grid::filled(1, 4, 4, 1.02);
        assert!((rmse_cm(&b, &a).unwrap() - 2.0).abs() < 1e-9);
        assert_eq!(rmse_cm(&a, &a).unwrap(), 0.0);
        assert!(rmse_cm(&a, &Grid::zeros(1, 4, 3)).is_err());
    }

    #[test]
    fn lcm_values() {
        assert_eq!(lcm(14, 4), 28);
        assert_eq!(lcm(14, 8), 56);
        assert_eq!(lcm(14, 16), 112);
        assert_eq!(lcm(14, 1), 14);
    }
}
