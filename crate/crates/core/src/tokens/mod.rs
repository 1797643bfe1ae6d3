//! Multi-level semantic token grids from a frozen patch-14 vision encoder.

mod stub;
mod vit;

use std::sync::Arc;

use crate::data::PATCH_MULTIPLE;
use crate::error::{Error, Result};
use crate::grid::Grid;

pub use stub::StubProvider;
pub use vit::{write_random_vit_weights, VitProvider, VitGeometry};

pub const N_TOKEN_LEVELS: usize = 4;

/// Default 1-based transformer blocks tapped for the four levels.
pub const DEFAULT_TOKEN_LAYERS: [usize; N_TOKEN_LEVELS] = [3, 6, 9, 12];

/// ViT-S/14 width.
pub const VIT_SMALL_EMBED_DIM: usize = 384;

/// Four patch-token grids, each `embed_dim × H/14 × W/14`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    pub levels: Vec<Grid>,
    pub source_layer_indices: [usize; N_TOKEN_LEVELS],
    pub embed_dim: usize,
}

impl TokenSet {
    pub fn new(levels: Vec<Grid>, source_layer_indices: [usize; N_TOKEN_LEVELS], embed_dim: usize) -> Result<Self> {
        if levels.len() != N_TOKEN_LEVELS {
            return Err(Error::Shape(format!("expected 4 token levels, got {}", levels.len())));
        }
        let dims = levels[0].dims();
        for l in &levels {
            if l.channels() != embed_dim || l.dims() != dims {
                return Err(Error::Shape(format!(
                    "token grid {}x{:?} does not match {embed_dim}x{dims:?}",
                    l.channels(),
                    l.dims()
                )));
            }
            if !l.is_finite() {
                return Err(Error::InvalidInput("token grid holds non-finite values".into()));
            }
        }
        Ok(Self {
            levels,
            source_layer_indices,
            embed_dim,
        })
    }

    /// `(H/14, W/14)`
    pub fn grid_dims(&self) -> (usize, usize) {
        self.levels[0].dims()
    }
}

/// Source of semantic tokens. Implementations are read-only after
/// construction.
pub trait TokenProvider: Send + Sync {
    /// Tokens for a normalized `3 × H × W` image with `H, W` multiples of 14.
    fn extract_tokens(&self, rgb: &Grid) -> Result<TokenSet>;

    fn embed_dim(&self) -> usize;

    fn layer_indices(&self) -> [usize; N_TOKEN_LEVELS];

    /// Digest of every weight the provider holds.
    fn fingerprint(&self) -> [u8; 32];

    fn kind(&self) -> &'static str;
}

pub type SharedProvider = Arc<dyn TokenProvider>;

pub(crate) fn check_image(rgb: &Grid) -> Result<(usize, usize)> {
    if rgb.channels() != 3 {
        return Err(Error::Shape(format!("expected 3-channel image, got {}", rgb.channels())));
    }
    let (h, w) = rgb.dims();
    if h == 0 || w == 0 || h % PATCH_MULTIPLE != 0 || w % PATCH_MULTIPLE != 0 {
        return Err(Error::InvalidInput(format!(
            "image {h}x{w} is not a multiple of the {PATCH_MULTIPLE}-pixel patch"
        )));
    }
    Ok((h / PATCH_MULTIPLE, w / PATCH_MULTIPLE))
}

/// How to build a provider.
#[derive(Clone, Debug, PartialEq)]
pub enum ProviderSpec {
    Stub { embed_dim: usize, seed: u64 },
    Pretrained {
        weights_path: std::path::PathBuf,
        layers: [usize; N_TOKEN_LEVELS],
        heads: Option<usize>,
    },
}

impl ProviderSpec {
    pub fn build(&self) -> Result<SharedProvider> {
        Ok(match self {
            ProviderSpec::Stub { embed_dim, seed } => Arc::new(StubProvider::new(*embed_dim, *seed)?),
            ProviderSpec::Pretrained {
                weights_path,
                layers,
                heads,
            } => Arc::new(VitProvider::load(weights_path, *layers, *heads)?),
        })
    }
}
