//! PNG figures: error maps with an RMSE caption and channel-mean feature
//! images. Output bytes depend only on the inputs.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Dark-blue → teal → yellow ramp (viridis-like control points).
const RAMP: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

/// Color for `t ∈ [0, 1]`.
pub fn ramp_color(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 1.0 };
    let x = t * (RAMP.len() - 1) as f64;
    let i = (x.floor() as usize).min(RAMP.len() - 2);
    let f = x - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (RAMP[i][c] + f * (RAMP[i + 1][c] - RAMP[i][c])).round() as u8;
    }
    out
}

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;

fn glyph(ch: char) -> [u8; GLYPH_H] {
    match ch {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0, 0, 0, 0, 0, 0x0C, 0x0C],
        '-' => [0, 0, 0, 0x1F, 0, 0, 0],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'c' => [0, 0, 0x0E, 0x10, 0x10, 0x11, 0x0E],
        'm' => [0, 0, 0x1A, 0x15, 0x15, 0x11, 0x11],
        _ => [0; GLYPH_H],
    }
}

/// Caption drawn under an error map.
pub fn annotation_text(rmse_cm: f64) -> String {
    format!("RMSE {rmse_cm:.2} cm")
}

struct Canvas {
    width: usize,
    height: usize,
    rgb: Vec<u8>,
}

impl Canvas {
    fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![0; width * height * 3],
        }
    }

    fn put(&mut self, y: usize, x: usize, c: [u8; 3]) {
        if y < self.height && x < self.width {
            let i = (y * self.width + x) * 3;
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    fn text(&mut self, y0: usize, x0: usize, s: &str) {
        for (k, ch) in s.chars().enumerate() {
            let rows = glyph(ch);
            for (dy, bits) in rows.iter().enumerate() {
                for dx in 0..GLYPH_W {
                    if bits >> (GLYPH_W - 1 - dx) & 1 == 1 {
                        self.put(y0 + dy, x0 + k * (GLYPH_W + 1) + dx, [255, 255, 255]);
                    }
                }
            }
        }
    }
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8], text: &[(&str, String)]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::path(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    for (k, v) in text {
        enc.add_text_chunk(k.to_string(), v.clone())
            .map_err(|e| Error::InvalidInput(format!("png text chunk: {e}")))?;
    }
    let to_io = |e: png::EncodingError| Error::path(path, std::io::Error::other(e));
    let mut w = enc.write_header().map_err(to_io)?;
    w.write_image_data(data).map_err(to_io)?;
    w.finish().map_err(to_io)
}

/// `|pred − gt|` on the color ramp (scaled to the largest error), with a
/// caption band underneath. Also stores `rmse_cm` and `max_error_m` as PNG
/// text chunks.
pub fn write_error_map(path: &Path, pred: &Grid, gt: &Grid, rmse_cm: f64) -> Result<()> {
    if pred.dims() != gt.dims() || pred.channels() != 1 || gt.channels() != 1 {
        return Err(Error::Shape(format!(
            "error map needs matching 1-channel maps, got {:?} and {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let (h, w) = pred.dims();
    let err: Vec<f64> = pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b).abs()).collect();
    let vmax = err.iter().cloned().fold(0.0, f64::max);
    let caption = annotation_text(rmse_cm);
    let band = GLYPH_H + 4;
    let width = w.max(caption.len() * (GLYPH_W + 1) + 2);
    let mut canvas = Canvas::new(width, h + band);
    for y in 0..h {
        for x in 0..w {
            let e = err[y * w + x];
            let t = if vmax > 0.0 { e / vmax } else { 0.0 };
            canvas.put(y, x, ramp_color(t));
        }
    }
    canvas.text(h + 2, 1, &caption);
    write_png(
        path,
        width,
        h + band,
        png::ColorType::Rgb,
        &canvas.rgb,
        &[("rmse_cm", format!("{rmse_cm:.2}")), ("max_error_m", format!("{vmax}"))],
    )
}

/// Mean over channels, min-max scaled to 8-bit gray (constant maps are black).
pub fn write_channel_mean(path: &Path, features: &Grid) -> Result<()> {
    let (h, w) = features.dims();
    let c = features.channels() as f64;
    let mut mean = vec![0.0; h * w];
    for ch in 0..features.channels() {
        for (m, v) in mean.iter_mut().zip(features.plane(ch)) {
            *m += v / c;
        }
    }
    let (lo, hi) = mean.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    let gray: Vec<u8> = mean
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    write_png(path, w, h, png::ColorType::Grayscale, &gray, &[])
}
