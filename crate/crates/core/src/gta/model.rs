use candle_core::Tensor;

use super::{align_tokens, CrossAttention, Fusion, Projection};
use crate::blocks::{check_channels, Conv, DepthEncoder, FeatureMap, RgbEncoder, Role, UpsampleHead};
use crate::config::{ModelConfig, Variant};
use crate::data::resample::bicubic_upsample;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::params::{zero_var, ParamStore};
use crate::tokens::{SharedProvider, TokenSet, N_TOKEN_LEVELS};

struct GtaLevel {
    encoder: DepthEncoder,
    projection: Projection,
    attention: CrossAttention,
    fusion: Fusion,
}

/// Intermediates of one level.
pub struct LevelTrace {
    pub encoded: Tensor,
    pub semantic: Tensor,
    pub infused: Tensor,
    pub rgb: Tensor,
    pub refined: Tensor,
}

/// Every intermediate of a forward pass.
pub struct Trace {
    pub stem: Tensor,
    pub levels: Vec<LevelTrace>,
    /// `(1, 1, H, W)`
    pub output: Tensor,
}

impl Trace {
    pub fn feature_maps(&self) -> Result<Vec<FeatureMap>> {
        let mut out = vec![FeatureMap::new(self.stem.clone(), Role::DepthStem)?];
        for (i, l) in self.levels.iter().enumerate() {
            let i = i + 1;
            out.push(FeatureMap::new(l.encoded.clone(), Role::Encoded(i))?);
            out.push(FeatureMap::new(l.semantic.clone(), Role::Semantic(i))?);
            out.push(FeatureMap::new(l.infused.clone(), Role::Infused(i))?);
            out.push(FeatureMap::new(l.rgb.clone(), Role::Rgb(i))?);
            out.push(FeatureMap::new(l.refined.clone(), Role::Refined(i))?);
        }
        out.push(FeatureMap::new(self.output.clone(), Role::Output)?);
        Ok(out)
    }
}

/// The four-level guided depth super-resolution network. The token
/// provider is frozen: its weights never enter the parameter store.
pub struct NaimaModel {
    config: ModelConfig,
    store: ParamStore,
    provider: SharedProvider,
    stem: Conv,
    levels: Vec<GtaLevel>,
    rgb: RgbEncoder,
    head: UpsampleHead,
}

impl NaimaModel {
    pub fn new(config: ModelConfig, provider: SharedProvider) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let bc = config.block_config();
        let mut store = ParamStore::new(config.dtype.dtype(), config.seed);
        let stem = Conv::new(&mut store, "stem", 1, c, 3)?;
        let levels = (1..=N_TOKEN_LEVELS)
            .map(|i| {
                let name = format!("level{i}");
                Ok(GtaLevel {
                    encoder: DepthEncoder::new(&mut store, &format!("{name}.encoder"), &bc)?,
                    projection: Projection::new(
                        &mut store,
                        &format!("{name}.projection"),
                        provider.embed_dim(),
                        c,
                        config.shuffle_factor,
                    )?,
                    attention: CrossAttention::new(
                        &mut store,
                        &format!("{name}.attention"),
                        c,
                        config.d_k(),
                        config.attention.raw_qkv,
                        config.alpha_init,
                        config.attention.max_n,
                    )?,
                    fusion: Fusion::new(&mut store, &format!("{name}.fusion"), c, config.reduction)?,
                })
            })
            .collect::<Result<_>>()?;
        let rgb = RgbEncoder::new(&mut store, "rgb", c, config.rgb_blocks_per_level, N_TOKEN_LEVELS)?;
        let head = UpsampleHead::new(&mut store, "head", &bc, config.head_rcabs)?;
        Ok(Self {
            config,
            store,
            provider,
            stem,
            levels,
            rgb,
            head,
        })
    }

    /// Builds the provider described by the config, then the model.
    pub fn from_config(config: ModelConfig) -> Result<Self> {
        let provider = config.semantic_encoder.provider_spec()?.build()?;
        Self::new(config, provider)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn provider(&self) -> &SharedProvider {
        &self.provider
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn alpha(&self, level: usize) -> Result<f64> {
        let l = self.level(level)?;
        Ok(l.attention.alpha.as_tensor().to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?[0])
    }

    pub fn set_alpha(&self, level: usize, value: f64) -> Result<()> {
        let var = &self.level(level)?.attention.alpha;
        var.set(&Tensor::full(value, 1, var.device())?.to_dtype(var.dtype())?)?;
        Ok(())
    }

    fn level(&self, level: usize) -> Result<&GtaLevel> {
        self.levels
            .get(level.wrapping_sub(1))
            .ok_or_else(|| Error::InvalidInput(format!("level {level} out of range 1..=4")))
    }

    pub fn cross_attention(&self, level: usize) -> Result<&CrossAttention> {
        Ok(&self.level(level)?.attention)
    }

    pub fn projection(&self, level: usize) -> Result<&Projection> {
        Ok(&self.level(level)?.projection)
    }

    pub fn fusion(&self, level: usize) -> Result<&Fusion> {
        Ok(&self.level(level)?.fusion)
    }

    /// Zeroes every residual branch, the token projections and the gates,
    /// which reduces the network to the bicubic skip.
    pub fn zero_residuals(&self) -> Result<()> {
        for l in &self.levels {
            l.encoder.zero_residual()?;
            l.projection.zero()?;
            zero_var(&l.attention.alpha)?;
            l.fusion.zero()?;
        }
        self.rgb.zero_residual()?;
        self.head.zero_residual()
    }

    pub fn extract_tokens(&self, rgb: &Grid) -> Result<TokenSet> {
        self.provider.extract_tokens(rgb)
    }

    fn check_inputs(&self, rgb: &Grid, d_lr: &Grid) -> Result<usize> {
        if rgb.channels() != 3 || d_lr.channels() != 1 {
            return Err(Error::Shape(format!(
                "expected 3-channel rgb and 1-channel depth, got {} and {}",
                rgb.channels(),
                d_lr.channels()
            )));
        }
        let s = self.config.scale;
        let (h, w) = rgb.dims();
        if d_lr.dims() != (h / s, w / s) || h % s != 0 || w % s != 0 {
            return Err(Error::InvalidInput(format!(
                "rgb {h}x{w} and LR depth {:?} do not match scale {s}",
                d_lr.dims()
            )));
        }
        Ok(s)
    }

    /// Full forward pass with every intermediate kept.
    pub fn forward_traced(&self, rgb: &Grid, d_lr: &Grid, tokens: &TokenSet, variant: Variant) -> Result<Trace> {
        let s = self.check_inputs(rgb, d_lr)?;
        let (h, w) = rgb.dims();
        if tokens.levels.len() != self.levels.len() {
            return Err(Error::Shape("token set must hold one grid per level".into()));
        }
        let dtype = self.store.dtype();
        let device = self.store.device();
        let skip = bicubic_upsample(d_lr, s)?.to_tensor(dtype, device)?;
        let rgb_t = rgb.to_tensor(dtype, device)?;
        let stem = self.stem.forward(&skip)?;
        let mut rgb_h = self.rgb.stem(&rgb_t)?;
        let mut d = stem.clone();
        let mut traces = Vec::with_capacity(self.levels.len());
        for (idx, (l, tau)) in self.levels.iter().zip(&tokens.levels).enumerate() {
            let i = idx + 1;
            let step = || -> Result<LevelTrace> {
                let encoded = l.encoder.forward(&d)?;
                let tau = tau.to_tensor(dtype, device)?;
                let semantic = align_tokens(&l.projection.forward(&tau)?, self.config.shuffle_factor, (h, w))?;
                check_channels(&semantic, self.config.channels, "aligned tokens")?;
                let infused = match variant {
                    Variant::Naima => l.attention.forward(&encoded, &semantic, i)?,
                    Variant::NaimaPlus => (&encoded + &semantic)?,
                };
                let rgb_i = self.rgb.level(&rgb_h, i)?;
                let refined = l.fusion.forward(&infused, &rgb_i)?;
                Ok(LevelTrace {
                    encoded,
                    semantic,
                    infused,
                    rgb: rgb_i,
                    refined,
                })
            };
            let t = step().map_err(|e| e.at_level(i))?;
            d = t.refined.clone();
            rgb_h = t.rgb.clone();
            traces.push(t);
        }
        let output = self.head.forward(&d, &skip)?;
        Ok(Trace {
            stem,
            levels: traces,
            output,
        })
    }

    /// `D_hr` as a `(1, 1, H, W)` tensor, differentiable in the parameters.
    pub fn forward_with_tokens(&self, rgb: &Grid, d_lr: &Grid, tokens: &TokenSet, variant: Variant) -> Result<Tensor> {
        Ok(self.forward_traced(rgb, d_lr, tokens, variant)?.output)
    }

    /// Forward pass with the configured variant.
    pub fn forward(&self, rgb: &Grid, d_lr: &Grid) -> Result<Tensor> {
        let tokens = self.extract_tokens(rgb)?;
        self.forward_with_tokens(rgb, d_lr, &tokens, self.config.variant)
    }

    /// Inference: `D_hr` as a `1 × H × W` grid.
    pub fn predict(&self, rgb: &Grid, d_lr: &Grid) -> Result<Grid> {
        Grid::from_tensor(&self.forward(rgb, d_lr)?)
    }
}

/// Forward pass through the gated cross-attention pipeline.
pub fn naima_forward(model: &NaimaModel, rgb: &Grid, d_lr: &Grid) -> Result<Grid> {
    let tokens = model.extract_tokens(rgb)?;
    Grid::from_tensor(&model.forward_with_tokens(rgb, d_lr, &tokens, Variant::Naima)?)
}

/// Same pipeline with cross-attention replaced by `D* = E + F`.
pub fn naima_plus_forward(model: &NaimaModel, rgb: &Grid, d_lr: &Grid) -> Result<Grid> {
    let tokens = model.extract_tokens(rgb)?;
    Grid::from_tensor(&model.forward_with_tokens(rgb, d_lr, &tokens, Variant::NaimaPlus)?)
}
