//! Layered run configuration: flat `dotted.key = value` text.
//!
//! Resolution order is defaults, then a config file, then command-line
//! overrides. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::DType;

use crate::blocks::BlockConfig;
use crate::data::io::parse_key_values;
use crate::error::{Error, Result};
use crate::objective::{LossConfig, LossKind};
use crate::tokens::{ProviderSpec, DEFAULT_TOKEN_LAYERS, N_TOKEN_LEVELS, VIT_SMALL_EMBED_DIM};
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Gated cross-attention injection.
    Naima,
    /// Ablation: semantic features added directly, `D* = E + F`.
    NaimaPlus,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Naima => "naima",
            Variant::NaimaPlus => "naima_plus",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naima" => Ok(Variant::Naima),
            "naima_plus" | "naima+" => Ok(Variant::NaimaPlus),
            _ => Err(Error::Config(format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown dtype `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Stub,
    Pretrained,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub weights_path: Option<PathBuf>,
    pub embed_dim: usize,
    pub seed: u64,
    pub layers: [usize; N_TOKEN_LEVELS],
    pub heads: Option<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Stub,
            weights_path: None,
            embed_dim: VIT_SMALL_EMBED_DIM,
            seed: 0,
            layers: DEFAULT_TOKEN_LAYERS,
            heads: None,
        }
    }
}

impl EncoderConfig {
    pub fn provider_spec(&self) -> Result<ProviderSpec> {
        Ok(match self.kind {
            EncoderKind::Stub => ProviderSpec::Stub {
                embed_dim: self.embed_dim,
                seed: self.seed,
            },
            EncoderKind::Pretrained => ProviderSpec::Pretrained {
                weights_path: self.weights_path.clone().ok_or_else(|| {
                    Error::Config("semantic_encoder.weights_path is required for pretrained".into())
                })?,
                layers: self.layers,
                heads: self.heads,
            },
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    /// Query/key width; `None` uses the working channel width.
    pub d_k: Option<usize>,
    /// Largest number of flattened positions accepted per level.
    pub max_n: usize,
    /// Use `E` and `F` directly as query, key and value.
    pub raw_qkv: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub rcab_per_level: usize,
    pub reduction: usize,
    pub head_rcabs: usize,
    pub rgb_blocks_per_level: usize,
    pub alpha_init: f64,
    pub attention: AttentionConfig,
    pub variant: Variant,
    pub scale: usize,
    pub shuffle_factor: usize,
    pub dtype: Precision,
    pub seed: u64,
    pub semantic_encoder: EncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            rcab_per_level: 4,
            reduction: 16,
            head_rcabs: 2,
            rgb_blocks_per_level: 2,
            alpha_init: 0.0,
            attention: AttentionConfig {
                d_k: None,
                max_n: 224 * 224,
                raw_qkv: false,
            },
            variant: Variant::Naima,
            scale: 4,
            shuffle_factor: 2,
            dtype: Precision::F32,
            seed: 0,
            semantic_encoder: EncoderConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Desk-scale model used by tests and the overfit check.
    pub fn tiny() -> Self {
        Self {
            channels: 8,
            rcab_per_level: 1,
            reduction: 4,
            head_rcabs: 1,
            rgb_blocks_per_level: 1,
            semantic_encoder: EncoderConfig {
                embed_dim: 16,
                ..EncoderConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            channels: self.channels,
            n_rcab_per_level: self.rcab_per_level,
            reduction: self.reduction,
            n_levels: N_TOKEN_LEVELS,
        }
    }

    pub fn d_k(&self) -> usize {
        if self.attention.raw_qkv {
            self.channels
        } else {
            self.attention.d_k.unwrap_or(self.channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block_config().validate()?;
        if ![4, 8, 16].contains(&self.scale) {
            return Err(Error::Config(format!("scale must be 4, 8 or 16, got {}", self.scale)));
        }
        if self.shuffle_factor == 0 {
            return Err(Error::Config("shuffle factor must be positive".into()));
        }
        if self.d_k() == 0 {
            return Err(Error::Config("attention d_k must be positive".into()));
        }
        if self.attention.raw_qkv && self.attention.d_k.is_some_and(|d| d != self.channels) {
            return Err(Error::Config("raw_qkv requires d_k = channels".into()));
        }
        if !self.alpha_init.is_finite() {
            return Err(Error::Config("alpha_init must be finite".into()));
        }
        Ok(())
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: invalid value `{value}`")))
}

fn parse_layers(key: &str, value: &str) -> Result<[usize; N_TOKEN_LEVELS]> {
    let v: Vec<usize> = value
        .split(',')
        .map(|s| parse(key, s.trim()))
        .collect::<Result<_>>()?;
    v.try_into()
        .map_err(|_| Error::Config(format!("`{key}` needs {N_TOKEN_LEVELS} comma-separated layers")))
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "auto" || value.is_empty() {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show_optional<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), T::to_string)
}

/// Fully resolved settings for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            data_dir: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "model.channels" => m.channels = parse(key, value)?,
            "model.rcab_per_level" => m.rcab_per_level = parse(key, value)?,
            "model.reduction" => m.reduction = parse(key, value)?,
            "model.head_rcabs" => m.head_rcabs = parse(key, value)?,
            "model.rgb_blocks_per_level" => m.rgb_blocks_per_level = parse(key, value)?,
            "model.alpha_init" => m.alpha_init = parse(key, value)?,
            "model.attention.d_k" => m.attention.d_k = parse_optional(key, value)?,
            "model.attention.max_n" => m.attention.max_n = parse(key, value)?,
            "model.attention.raw_qkv" => m.attention.raw_qkv = parse(key, value)?,
            "model.variant" => m.variant = value.parse()?,
            "model.scale" => m.scale = parse(key, value)?,
            "model.shuffle_factor" => m.shuffle_factor = parse(key, value)?,
            "model.dtype" => m.dtype = value.parse()?,
            "model.seed" => m.seed = parse(key, value)?,
            "semantic_encoder.kind" => {
                m.semantic_encoder.kind = match value {
                    "stub" => EncoderKind::Stub,
                    "pretrained" => EncoderKind::Pretrained,
                    _ => return Err(Error::Config(format!("unknown encoder kind `{value}`"))),
                }
            }
            "semantic_encoder.weights_path" => {
                m.semantic_encoder.weights_path = (!value.is_empty()).then(|| PathBuf::from(value))
            }
            "semantic_encoder.embed_dim" => m.semantic_encoder.embed_dim = parse(key, value)?,
            "semantic_encoder.seed" => m.semantic_encoder.seed = parse(key, value)?,
            "semantic_encoder.layers" => m.semantic_encoder.layers = parse_layers(key, value)?,
            "semantic_encoder.heads" => m.semantic_encoder.heads = parse_optional(key, value)?,
            "loss.lambda" => self.loss.lambda = parse(key, value)?,
            "loss.kind" => self.loss.kind = value.parse()?,
            "train.lr" => t.lr0 = parse(key, value)?,
            "train.decay_factor" => t.decay_factor = parse(key, value)?,
            "train.decay_every" => t.decay_every = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.patch_size" => t.patch_size = parse_optional(key, value)?,
            "train.val_every" => t.val_every = parse(key, value)?,
            "paths.data" => self.data_dir = Some(PathBuf::from(value)),
            "paths.out" => self.out_dir = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_key_values(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let e = &m.semantic_encoder;
        let t = &self.train;
        let mut kv = vec![
            ("model.channels", m.channels.to_string()),
            ("model.rcab_per_level", m.rcab_per_level.to_string()),
            ("model.reduction", m.reduction.to_string()),
            ("model.head_rcabs", m.head_rcabs.to_string()),
            ("model.rgb_blocks_per_level", m.rgb_blocks_per_level.to_string()),
            ("model.alpha_init", m.alpha_init.to_string()),
            ("model.attention.d_k", show_optional(&m.attention.d_k)),
            ("model.attention.max_n", m.attention.max_n.to_string()),
            ("model.attention.raw_qkv", m.attention.raw_qkv.to_string()),
            ("model.variant", m.variant.to_string()),
            ("model.scale", m.scale.to_string()),
            ("model.shuffle_factor", m.shuffle_factor.to_string()),
            ("model.dtype", m.dtype.to_string()),
            ("model.seed", m.seed.to_string()),
            (
                "semantic_encoder.kind",
                match e.kind {
                    EncoderKind::Stub => "stub",
                    EncoderKind::Pretrained => "pretrained",
                }
                .to_string(),
            ),
            (
                "semantic_encoder.weights_path",
                e.weights_path
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            ("semantic_encoder.embed_dim", e.embed_dim.to_string()),
            ("semantic_encoder.seed", e.seed.to_string()),
            (
                "semantic_encoder.layers",
                e.layers.map(|l| l.to_string()).join(","),
            ),
            ("semantic_encoder.heads", show_optional(&e.heads)),
            ("loss.lambda", self.loss.lambda.to_string()),
            (
                "loss.kind",
                match self.loss.kind {
                    LossKind::L1Grad => "l1_grad",
                    LossKind::L1 => "l1",
                }
                .to_string(),
            ),
            ("train.lr", t.lr0.to_string()),
            ("train.decay_factor", t.decay_factor.to_string()),
            ("train.decay_every", t.decay_every.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.patch_size", show_optional(&t.patch_size)),
            ("train.val_every", t.val_every.to_string()),
        ];
        if let Some(p) = &self.data_dir {
            kv.push(("paths.data", p.display().to_string()));
        }
        if let Some(p) = &self.out_dir {
            kv.push(("paths.out", p.display().to_string()));
        }
        kv.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.model = ModelConfig::tiny();
        c.model.variant = Variant::NaimaPlus;
        c.model.semantic_encoder.layers = [1, 2, 3, 4];
        c.loss.kind = LossKind::L1;
        c.train.patch_size = Some(28);
        c.data_dir = Some("/tmp/data".into());
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn layering_and_errors() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nmodel.channels = 32\nloss.lambda = 0.1\n").unwrap();
        assert_eq!(c.model.channels, 32);
        assert_eq!(c.loss.lambda, 0.1);
        c.set("model.channels", "16").unwrap();
        assert_eq!(c.model.channels, 16);
        assert!(c.set("model.nope", "1").is_err());
        assert!(c.set("model.channels", "x").is_err());
        assert!(c.set("semantic_encoder.layers", "1,2,3").is_err());
        assert!(c.apply_text("no equals sign").is_err());
    }

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
        let mut t = ModelConfig::tiny();
        t.validate().unwrap();
        t.scale = 3;
        assert!(t.validate().is_err());
        let mut r = ModelConfig::tiny();
        r.attention.raw_qkv = true;
        r.attention.d_k = Some(4);
        assert!(r.validate().is_err());
    }
}
