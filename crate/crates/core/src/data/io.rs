//! On-disk dataset layout.
//!
//! ```text
//! <root>/<split>/<id>_rgb.png      8-bit RGB
//! <root>/<split>/<id>_depth.png    16-bit gray, value * depth_scale_mm = millimeters
//! <root>/<split>/<id>_meta         key=value lines: depth_scale_mm, width, height[, scale]
//! <root>/<split>/<id>_depth.f32    raw grids (synthetic data only)
//! <root>/<split>/<id>_depth_lr.f32
//! ```
//!
//! Raw grids carry a 16-byte little-endian header: magic `NAIM`, dtype code
//! (1 = f32), height, width; followed by `height * width` f32 values.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};

use super::{bicubic_downsample, SamplePair};
use crate::error::{Error, Result};
use crate::grid::Grid;

pub const RAW_MAGIC: [u8; 4] = *b"NAIM";
pub const RAW_DTYPE_F32: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMeta {
    pub depth_scale_mm: f64,
    pub width: usize,
    pub height: usize,
    pub scale: Option<usize>,
}

impl SampleMeta {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "depth_scale_mm={}\nwidth={}\nheight={}\n",
            self.depth_scale_mm, self.width, self.height
        );
        if let Some(scale) = self.scale {
            s.push_str(&format!("scale={scale}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let get = |k: &str| {
            kv.get(k)
                .ok_or_else(|| Error::InvalidInput(format!("meta is missing `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::InvalidInput(format!("meta `{k}` is not an integer")))
        };
        Ok(Self {
            depth_scale_mm: get("depth_scale_mm")?
                .parse()
                .map_err(|_| Error::InvalidInput("meta `depth_scale_mm` is not a number".into()))?,
            width: num("width")?,
            height: num("height")?,
            scale: kv.contains_key("scale").then(|| num("scale")).transpose()?,
        })
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::path(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::path(path, e))
}

pub fn encode_raw_grid(map: &Grid) -> Result<Vec<u8>> {
    if map.channels() != 1 {
        return Err(Error::Shape("raw grids hold a single channel".into()));
    }
    let mut out = Vec::with_capacity(16 + 4 * map.data().len());
    out.extend_from_slice(&RAW_MAGIC);
    out.extend_from_slice(&RAW_DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(map.height() as u32).to_le_bytes());
    out.extend_from_slice(&(map.width() as u32).to_le_bytes());
    for &v in map.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_raw_grid(bytes: &[u8]) -> Result<Grid> {
    let bad = |m: String| Error::InvalidInput(format!("raw grid: {m}"));
    if bytes.len() < 16 || bytes[..4] != RAW_MAGIC {
        return Err(bad("missing header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    if word(4) != RAW_DTYPE_F32 {
        return Err(bad(format!("unsupported dtype code {}", word(4))));
    }
    let (h, w) = (word(8) as usize, word(12) as usize);
    let body = &bytes[16..];
    if body.len() != h * w * 4 {
        return Err(bad(format!("expected {} payload bytes, found {}", h * w * 4, body.len())));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Grid::new(1, h, w, data)
}

pub fn write_raw_grid(path: &Path, map: &Grid) -> Result<()> {
    write(path, &encode_raw_grid(map)?)
}

pub fn read_raw_grid(path: &Path) -> Result<Grid> {
    decode_raw_grid(&read(path)?)
}

/// Quantizes `[0, 1]` RGB to 8 bits.
pub fn write_rgb_png(path: &Path, rgb: &Grid) -> Result<()> {
    let (h, w) = rgb.dims();
    let img = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (rgb.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    img.save(path)?;
    Ok(())
}

pub fn read_rgb_png(path: &Path) -> Result<Grid> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Grid::from_fn(3, h as usize, w as usize, |c, y, x| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

pub fn write_depth_png(path: &Path, depth: &Grid, depth_scale_mm: f64) -> Result<()> {
    let (h, w) = depth.dims();
    let img = ImageBuffer::<Luma<u16>, _>::from_fn(w as u32, h as u32, |x, y| {
        let mm = depth.get(0, y as usize, x as usize) * 1000.0 / depth_scale_mm;
        Luma([mm.round().clamp(0.0, u16::MAX as f64) as u16])
    });
    img.save(path)?;
    Ok(())
}

pub fn read_depth_png(path: &Path, depth_scale_mm: f64) -> Result<Grid> {
    let img = image::open(path)?.to_luma16();
    let (w, h) = img.dimensions();
    Ok(Grid::from_fn(1, h as usize, w as usize, |_, y, x| {
        img.get_pixel(x as u32, y as u32)[0] as f64 * depth_scale_mm / 1000.0
    }))
}

pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    root.join(split)
}

/// Writes one sample into `dir`; `raw` additionally emits float grids.
pub fn write_sample(dir: &Path, sample: &SamplePair, depth_scale_mm: f64, raw: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::path(dir, e))?;
    let id = &sample.id;
    write_rgb_png(&dir.join(format!("{id}_rgb.png")), &sample.rgb)?;
    write_depth_png(&dir.join(format!("{id}_depth.png")), &sample.depth_gt, depth_scale_mm)?;
    let (h, w) = sample.hr_dims();
    let meta = SampleMeta {
        depth_scale_mm,
        width: w,
        height: h,
        scale: Some(sample.scale),
    };
    write(&dir.join(format!("{id}_meta")), meta.to_text().as_bytes())?;
    if raw {
        write_raw_grid(&dir.join(format!("{id}_depth.f32")), &sample.depth_gt)?;
        write_raw_grid(&dir.join(format!("{id}_depth_lr.f32")), &sample.depth_lr)?;
    }
    Ok(())
}

/// Sample ids in a split directory, sorted.
pub fn list_ids(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::path(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let name = entry?.file_name();
        if let Some(id) = name.to_str().and_then(|n| n.strip_suffix("_meta")) {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn read_meta(dir: &Path, id: &str) -> Result<SampleMeta> {
    let path = dir.join(format!("{id}_meta"));
    let text = fs::read_to_string(&path).map_err(|e| Error::path(&path, e))?;
    SampleMeta::parse(&text).map_err(|e| e.for_sample(id))
}

/// Loads one sample and synthesizes its LR input by bicubic degradation.
pub fn read_sample(dir: &Path, id: &str, scale: usize) -> Result<SamplePair> {
    let meta = read_meta(dir, id)?;
    if let Some(s) = meta.scale {
        if s != scale {
            return Err(Error::Incompatible(format!(
                "sample `{id}` was prepared for scale {s}, requested {scale}"
            )));
        }
    }
    let rgb = read_rgb_png(&dir.join(format!("{id}_rgb.png")))?;
    let depth = read_depth_png(&dir.join(format!("{id}_depth.png")), meta.depth_scale_mm)?;
    if depth.dims() != (meta.height, meta.width) {
        return Err(Error::Shape(format!(
            "sample `{id}`: depth is {:?}, meta says {}x{}",
            depth.dims(),
            meta.height,
            meta.width
        )));
    }
    let lr = bicubic_downsample(&depth, scale).map_err(|e| e.for_sample(id))?;
    SamplePair::new(id, rgb, depth, lr, scale).map_err(|e| e.for_sample(id))
}

pub fn read_split(dir: &Path, scale: usize) -> Result<Vec<SamplePair>> {
    list_ids(dir)?
        .iter()
        .map(|id| read_sample(dir, id, scale))
        .collect()
}
