//! Procedural RGB-D scenes for offline training and tests.
//!
//! Depth is piecewise constant: a background plane with rectangles and
//! ellipses pasted in front. The RGB guide is shaded from depth and then
//! overlaid with gratings, color patches and pixel noise that ignore the
//! depth layout, so it carries edges with no depth counterpart.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{SamplePair, PATCH_MULTIPLE};
use crate::error::{Error, Result};
use crate::grid::Grid;

enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Ellipse { cy, cx, ry, rx } => {
                let dy = (y - cy) / ry;
                let dx = (x - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
        }
    }

    fn random(rng: &mut ChaCha8Rng, h: f64, w: f64) -> Self {
        let sh = rng.random_range(0.15..0.5) * h;
        let sw = rng.random_range(0.15..0.5) * w;
        let cy = rng.random_range(0.0..h);
        let cx = rng.random_range(0.0..w);
        if rng.random_bool(0.5) {
            Shape::Rect {
                y0: cy - sh / 2.0,
                x0: cx - sw / 2.0,
                y1: cy + sh / 2.0,
                x1: cx + sw / 2.0,
            }
        } else {
            Shape::Ellipse {
                cy,
                cx,
                ry: sh / 2.0,
                rx: sw / 2.0,
            }
        }
    }
}

fn check_dims(height: usize, width: usize, scale: usize) -> Result<()> {
    if scale < 2 {
        return Err(Error::InvalidInput(format!("scale must be >= 2, got {scale}")));
    }
    for d in [height, width] {
        if d == 0 || d % PATCH_MULTIPLE != 0 || d % scale != 0 {
            return Err(Error::InvalidInput(format!(
                "dimension {d} must be a positive multiple of {PATCH_MULTIPLE} and of scale {scale}"
            )));
        }
    }
    Ok(())
}

/// Renders scene `index` of the stream identified by `seed`.
pub fn generate_scene(index: usize, height: usize, width: usize, scale: usize, seed: u64) -> Result<SamplePair> {
    check_dims(height, width, scale)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let (hf, wf) = (height as f64, width as f64);

    let background = rng.random_range(4.0..8.0);
    let n_objects = rng.random_range(3..=6);
    let objects: Vec<(Shape, f64, [f64; 3])> = (0..n_objects)
        .map(|_| {
            let shape = Shape::random(&mut rng, hf, wf);
            let depth = rng.random_range(0.8..background - 0.5);
            let albedo = [
                rng.random_range(0.3..1.0),
                rng.random_range(0.3..1.0),
                rng.random_range(0.3..1.0),
            ];
            (shape, depth, albedo)
        })
        .collect();
    let bg_albedo = [
        rng.random_range(0.3..1.0),
        rng.random_range(0.3..1.0),
        rng.random_range(0.3..1.0),
    ];

    let mut depth = Grid::filled(1, height, width, background);
    let mut albedo = Grid::from_fn(3, height, width, |c, _, _| bg_albedo[c]);
    for (shape, d, a) in &objects {
        for y in 0..height {
            for x in 0..width {
                if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    depth.set(0, y, x, *d);
                    for (c, v) in a.iter().enumerate() {
                        albedo.set(c, y, x, *v);
                    }
                }
            }
        }
    }

    // Texture that ignores depth boundaries.
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let freq = rng.random_range(0.15..0.6);
    let grating_amp = rng.random_range(0.05..0.15);
    let patches: Vec<(Shape, [f64; 3])> = (0..rng.random_range(2..=4))
        .map(|_| {
            let s = Shape::random(&mut rng, hf, wf);
            let color = [rng.random(), rng.random(), rng.random()];
            (s, color)
        })
        .collect();

    let mut rgb = Grid::zeros(3, height, width);
    for y in 0..height {
        for x in 0..width {
            let d = depth.get(0, y, x);
            let shade = 0.35 + 0.65 * (1.0 - d / 8.5);
            let g = grating_amp
                * (freq * (x as f64 * theta.cos() + y as f64 * theta.sin())).sin();
            let patch = patches
                .iter()
                .find(|(s, _)| s.contains(y as f64 + 0.5, x as f64 + 0.5));
            for c in 0..3 {
                let mut v = albedo.get(c, y, x) * shade + g;
                if let Some((_, color)) = patch {
                    v = 0.5 * v + 0.5 * color[c];
                }
                v += rng.random_range(-0.03..0.03);
                rgb.set(c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }

    SamplePair::from_hr(format!("synth_{index:05}"), rgb, depth, scale)
}

/// `count` scenes; sample `i` depends only on `(i, dims, scale, seed)`.
pub fn generate_synthetic_dataset(
    count: usize,
    height: usize,
    width: usize,
    scale: usize,
    seed: u64,
) -> Result<Vec<SamplePair>> {
    check_dims(height, width, scale)?;
    (0..count)
        .map(|i| generate_scene(i, height, width, scale, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::bicubic_downsample;

    #[test]
    fn empty_and_deterministic() {
        assert!(generate_synthetic_dataset(0, 56, 56, 4, 1).unwrap().is_empty());
        let a = generate_synthetic_dataset(3, 56, 56, 4, 7).unwrap();
        let b = generate_synthetic_dataset(3, 56, 56, 4, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(3, 56, 56, 4, 8).unwrap();
        assert_ne!(a[0].depth_gt, c[0].depth_gt);
        // prefix stability
        let d = generate_synthetic_dataset(1, 56, 56, 4, 7).unwrap();
        assert_eq!(d[0], a[0]);
    }

    #[test]
    fn lr_is_bicubic_of_gt() {
        for s in [4, 8, 16] {
            let set = generate_synthetic_dataset(2, 112, 112, s, 3).unwrap();
            for p in &set {
                let lr = bicubic_downsample(&p.depth_gt, s).unwrap();
                for (a, b) in lr.data().iter().zip(p.depth_lr.data()) {
                    assert!((a - b).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn scenes_have_depth_edges_and_valid_rgb() {
        let set = generate_synthetic_dataset(4, 56, 56, 4, 11).unwrap();
        for p in &set {
            let (lo, hi) = p.depth_gt.min_max();
            assert!(hi > lo && lo > 0.0);
            assert!(p.rgb.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn invalid_dims() {
        assert!(generate_synthetic_dataset(1, 57, 56, 4, 0).is_err());
        assert!(generate_synthetic_dataset(1, 42, 42, 4, 0).is_err());
        assert!(generate_synthetic_dataset(1, 56, 56, 1, 0).is_err());
    }
}
