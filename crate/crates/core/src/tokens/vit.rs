//! Frozen DINOv2-style ViT with patch size 14, loaded from safetensors.
//!
//! Parameter names follow the reference checkpoint layout: `cls_token`,
//! `pos_embed`, `patch_embed.proj.*`, `blocks.{i}.{norm1,attn.qkv,attn.proj,
//! ls1.gamma,norm2,mlp.fc1,mlp.fc2,ls2.gamma}.*`. Weights are plain tensors,
//! never `Var`s, so no gradient reaches them.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, IndexOp, Module, Tensor, D};
use candle_nn::{conv2d, layer_norm, linear, Conv2d, Conv2dConfig, LayerNorm, Linear, VarBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{check_image, TokenProvider, TokenSet, N_TOKEN_LEVELS};
use crate::data::resample::{Border, Filter, Resampler};
use crate::data::PATCH_MULTIPLE;
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Bicubic (`a = -0.75`) with edge clamping, used to resize position
/// embeddings to the input's patch grid.
const POS_EMBED_RESAMPLER: Resampler = Resampler {
    filter: Filter::Cubic { a: -0.75 },
    border: Border::Clamp,
    antialias: false,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VitGeometry {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Side of the square patch grid the position embedding was trained on.
    pub pos_grid: usize,
}

struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ls1: Option<Tensor>,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    ls2: Option<Tensor>,
    heads: usize,
}

impl Block {
    fn load(vb: VarBuilder, dim: usize, heads: usize) -> candle_core::Result<Self> {
        let hidden = vb.pp("mlp.fc1").get_unchecked("weight")?.dim(0)?;
        let gamma = |name: &str| {
            let vb = vb.pp(name);
            vb.contains_tensor("gamma").then(|| vb.get(dim, "gamma")).transpose()
        };
        Ok(Self {
            norm1: layer_norm(dim, 1e-6, vb.pp("norm1"))?,
            qkv: linear(dim, 3 * dim, vb.pp("attn.qkv"))?,
            proj: linear(dim, dim, vb.pp("attn.proj"))?,
            ls1: gamma("ls1")?,
            norm2: layer_norm(dim, 1e-6, vb.pp("norm2"))?,
            fc1: linear(dim, hidden, vb.pp("mlp.fc1"))?,
            fc2: linear(hidden, dim, vb.pp("mlp.fc2"))?,
            ls2: gamma("ls2")?,
            heads,
        })
    }

    fn attention(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.i(0)?.contiguous()?;
        let k = qkv.i(1)?.contiguous()?;
        let v = qkv.i(2)?.contiguous()?;
        let att = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        let att = candle_nn::ops::softmax_last_dim(&att)?;
        let out = att.matmul(&v)?.transpose(1, 2)?.reshape((b, n, c))?;
        self.proj.forward(&out)
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let scale = |t: Tensor, g: &Option<Tensor>| match g {
            Some(g) => t.broadcast_mul(g),
            None => Ok(t),
        };
        let a = scale(self.attention(&self.norm1.forward(x)?)?, &self.ls1)?;
        let x = (x + a)?;
        let m = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu_erf()?)?;
        let m = scale(m, &self.ls2)?;
        x + m
    }
}

pub struct VitProvider {
    patch_embed: Conv2d,
    cls_token: Tensor,
    cls_pos: Tensor,
    patch_pos: Grid,
    blocks: Vec<Block>,
    layers: [usize; N_TOKEN_LEVELS],
    geometry: VitGeometry,
    fingerprint: [u8; 32],
}

fn fingerprint(tensors: &HashMap<String, Tensor>) -> Result<[u8; 32]> {
    let mut names: Vec<&String> = tensors.keys().collect();
    names.sort();
    let mut h = Sha256::new();
    for name in names {
        let t = &tensors[name];
        h.update(name.as_bytes());
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    Ok(h.finalize().into())
}

impl VitProvider {
    /// Loads weights from a safetensors file. `heads` defaults to
    /// `embed_dim / 64`.
    pub fn load(path: &Path, layers: [usize; N_TOKEN_LEVELS], heads: Option<usize>) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Init(format!("weights file {} not found", path.display())));
        }
        let tensors = candle_core::safetensors::load(path, &Device::Cpu)
            .map_err(|e| Error::Init(format!("{}: {e}", path.display())))?;
        Self::from_tensors(tensors, layers, heads)
    }

    pub fn from_tensors(
        tensors: HashMap<String, Tensor>,
        layers: [usize; N_TOKEN_LEVELS],
        heads: Option<usize>,
    ) -> Result<Self> {
        let init = |m: String| Error::Init(m);
        let cls = tensors
            .get("cls_token")
            .ok_or_else(|| init("missing `cls_token`".into()))?;
        let embed_dim = cls.dim(D::Minus1)?;
        let depth = (0..)
            .take_while(|i| tensors.contains_key(&format!("blocks.{i}.norm1.weight")))
            .count();
        let heads = heads.unwrap_or((embed_dim / 64).max(1));
        if heads == 0 || embed_dim % heads != 0 {
            return Err(init(format!("{heads} heads do not divide width {embed_dim}")));
        }
        if layers.iter().any(|&l| l == 0 || l > depth) || layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(init(format!(
                "token layers {layers:?} must be increasing within 1..={depth}"
            )));
        }
        let pos = tensors
            .get("pos_embed")
            .ok_or_else(|| init("missing `pos_embed`".into()))?
            .to_dtype(DType::F32)?;
        let n_pos = pos.dim(1)? - 1;
        let pos_grid = (n_pos as f64).sqrt().round() as usize;
        if pos_grid * pos_grid != n_pos {
            return Err(init(format!("{n_pos} position embeddings do not form a square grid")));
        }
        let fingerprint = fingerprint(&tensors)?;
        let cls_pos = pos.i((.., ..1, ..))?;
        // (1, M², D) -> D × M × M
        let patch_pos = Grid::from_tensor(
            &pos.i((.., 1.., ..))?
                .squeeze(0)?
                .t()?
                .reshape((embed_dim, pos_grid, pos_grid))?,
        )?;
        let cls_token = cls.to_dtype(DType::F32)?;

        let vb = VarBuilder::from_tensors(tensors, DType::F32, &Device::Cpu);
        let wrap = |e: candle_core::Error| init(e.to_string());
        let patch_embed = conv2d(
            3,
            embed_dim,
            PATCH_MULTIPLE,
            Conv2dConfig {
                stride: PATCH_MULTIPLE,
                ..Default::default()
            },
            vb.pp("patch_embed.proj"),
        )
        .map_err(wrap)?;
        let blocks = (0..depth)
            .map(|i| Block::load(vb.pp(format!("blocks.{i}")), embed_dim, heads))
            .collect::<candle_core::Result<Vec<_>>>()
            .map_err(wrap)?;
        Ok(Self {
            patch_embed,
            cls_token,
            cls_pos,
            patch_pos,
            blocks,
            layers,
            geometry: VitGeometry {
                embed_dim,
                depth,
                heads,
                pos_grid,
            },
            fingerprint,
        })
    }

    pub fn geometry(&self) -> VitGeometry {
        self.geometry
    }

    fn position_embedding(&self, gh: usize, gw: usize) -> Result<Tensor> {
        let resized = POS_EMBED_RESAMPLER.resize(&self.patch_pos, gh, gw);
        let patch = resized
            .to_tensor(DType::F32, &Device::Cpu)?
            .flatten_from(2)?
            .transpose(1, 2)?;
        Ok(Tensor::cat(&[&self.cls_pos, &patch], 1)?)
    }
}

impl TokenProvider for VitProvider {
    fn extract_tokens(&self, rgb: &Grid) -> Result<TokenSet> {
        let (gh, gw) = check_image(rgb)?;
        let x = rgb.to_tensor(DType::F32, &Device::Cpu)?;
        let patches = self.patch_embed.forward(&x)?.flatten_from(2)?.transpose(1, 2)?;
        let mut h = Tensor::cat(&[&self.cls_token, &patches], 1)?
            .broadcast_add(&self.position_embedding(gh, gw)?)?;
        let mut levels = Vec::with_capacity(N_TOKEN_LEVELS);
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h)?;
            if self.layers.contains(&(i + 1)) {
                // drop the class token; row-major patch order -> D × gh × gw
                let grid = h
                    .i((0, 1.., ..))?
                    .t()?
                    .reshape((self.geometry.embed_dim, gh, gw))?;
                levels.push(Grid::from_tensor(&grid)?);
            }
            if levels.len() == N_TOKEN_LEVELS {
                break;
            }
        }
        TokenSet::new(levels, self.layers, self.geometry.embed_dim)
    }

    fn embed_dim(&self) -> usize {
        self.geometry.embed_dim
    }

    fn layer_indices(&self) -> [usize; N_TOKEN_LEVELS] {
        self.layers
    }

    fn fingerprint(&self) -> [u8; 32] {
        self.fingerprint
    }

    fn kind(&self) -> &'static str {
        "pretrained"
    }
}

/// Writes a randomly initialized ViT in the expected safetensors layout.
/// Useful for exercising the pretrained code path offline.
pub fn write_random_vit_weights(path: &Path, geometry: VitGeometry, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let VitGeometry {
        embed_dim: d,
        depth,
        pos_grid,
        ..
    } = geometry;
    let mut tensors = HashMap::new();
    let mut put = |name: String, shape: &[usize], scale: f32, offset: f32| -> Result<()> {
        let n: usize = shape.iter().product();
        let v: Vec<f32> = (0..n).map(|_| offset + scale * rng.random_range(-1.0f32..1.0)).collect();
        tensors.insert(name, Tensor::from_vec(v, shape, &Device::Cpu)?);
        Ok(())
    };
    let patch_fan = (3 * PATCH_MULTIPLE * PATCH_MULTIPLE) as f32;
    put("cls_token".into(), &[1, 1, d], 0.02, 0.0)?;
    put("pos_embed".into(), &[1, pos_grid * pos_grid + 1, d], 0.02, 0.0)?;
    put("patch_embed.proj.weight".into(), &[d, 3, PATCH_MULTIPLE, PATCH_MULTIPLE], 1.0 / patch_fan.sqrt(), 0.0)?;
    put("patch_embed.proj.bias".into(), &[d], 0.01, 0.0)?;
    let lin = (d as f32).sqrt().recip();
    for i in 0..depth {
        let p = format!("blocks.{i}");
        put(format!("{p}.norm1.weight"), &[d], 0.1, 1.0)?;
        put(format!("{p}.norm1.bias"), &[d], 0.01, 0.0)?;
        put(format!("{p}.attn.qkv.weight"), &[3 * d, d], lin, 0.0)?;
        put(format!("{p}.attn.qkv.bias"), &[3 * d], 0.01, 0.0)?;
        put(format!("{p}.attn.proj.weight"), &[d, d], lin, 0.0)?;
        put(format!("{p}.attn.proj.bias"), &[d], 0.01, 0.0)?;
        put(format!("{p}.ls1.gamma"), &[d], 0.05, 0.1)?;
        put(format!("{p}.norm2.weight"), &[d], 0.1, 1.0)?;
        put(format!("{p}.norm2.bias"), &[d], 0.01, 0.0)?;
        put(format!("{p}.mlp.fc1.weight"), &[4 * d, d], lin, 0.0)?;
        put(format!("{p}.mlp.fc1.bias"), &[4 * d], 0.01, 0.0)?;
        put(format!("{p}.mlp.fc2.weight"), &[d, 4 * d], lin / 2.0, 0.0)?;
        put(format!("{p}.mlp.fc2.bias"), &[d], 0.01, 0.0)?;
        put(format!("{p}.ls2.gamma"), &[d], 0.05, 0.1)?;
    }
    put("norm.weight".into(), &[d], 0.0, 1.0)?;
    put("norm.bias".into(), &[d], 0.0, 0.0)?;
    candle_core::safetensors::save(&tensors, path)?;
    Ok(())
}
