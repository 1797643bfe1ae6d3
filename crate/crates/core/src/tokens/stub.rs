use sha2::{Digest, Sha256};

use super::{check_image, TokenProvider, TokenSet, DEFAULT_TOKEN_LAYERS, N_TOKEN_LEVELS};
use crate::error::{Error, Result};
use crate::grid::Grid;

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// First 8 bytes (little-endian) of SHA-256 over the dims and the IEEE bits
/// of every value.
pub fn image_checksum(rgb: &Grid) -> u64 {
    let mut h = Sha256::new();
    for d in [rgb.channels(), rgb.height(), rgb.width()] {
        h.update((d as u64).to_le_bytes());
    }
    for v in rgb.data() {
        h.update(v.to_bits().to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Uniform value in `[-1, 1)` for one token entry.
pub fn stub_value(seed: u64, checksum: u64, level: usize, channel: usize, y: usize, x: usize) -> f64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ checksum);
    h = splitmix64(h ^ level as u64);
    h = splitmix64(h ^ (((y as u64) << 32) | x as u64));
    h = splitmix64(h ^ channel as u64);
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64) * 2.0 - 1.0
}

/// 3×3 binomial blur `[1 2 1]ᵀ[1 2 1] / 16` with replicated borders.
pub fn binomial_smooth(src: &Grid) -> Grid {
    let (h, w) = src.dims();
    let at = |c, y: i64, x: i64| src.get(c, y.clamp(0, h as i64 - 1) as usize, x.clamp(0, w as i64 - 1) as usize);
    const K: [f64; 3] = [1.0, 2.0, 1.0];
    Grid::from_fn(src.channels(), h, w, |c, y, x| {
        let mut acc = 0.0;
        for (dy, ky) in K.iter().enumerate() {
            for (dx, kx) in K.iter().enumerate() {
                acc += ky * kx * at(c, y as i64 + dy as i64 - 1, x as i64 + dx as i64 - 1);
            }
        }
        acc / 16.0
    })
}

/// Offline stand-in for the pretrained encoder: a smooth pseudo-random field
/// keyed on `(seed, image checksum, level, position, channel)`.
#[derive(Clone, Debug)]
pub struct StubProvider {
    embed_dim: usize,
    seed: u64,
}

impl StubProvider {
    pub fn new(embed_dim: usize, seed: u64) -> Result<Self> {
        if embed_dim == 0 {
            return Err(Error::Config("stub embed_dim must be positive".into()));
        }
        Ok(Self { embed_dim, seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl TokenProvider for StubProvider {
    fn extract_tokens(&self, rgb: &Grid) -> Result<TokenSet> {
        let (gh, gw) = check_image(rgb)?;
        let checksum = image_checksum(rgb);
        let levels = (0..N_TOKEN_LEVELS)
            .map(|level| {
                let raw = Grid::from_fn(self.embed_dim, gh, gw, |c, y, x| {
                    stub_value(self.seed, checksum, level, c, y, x)
                });
                binomial_smooth(&raw)
            })
            .collect();
        TokenSet::new(levels, DEFAULT_TOKEN_LAYERS, self.embed_dim)
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn layer_indices(&self) -> [usize; N_TOKEN_LEVELS] {
        DEFAULT_TOKEN_LAYERS
    }

    fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"stub");
        h.update((self.embed_dim as u64).to_le_bytes());
        h.update(self.seed.to_le_bytes());
        h.finalize().into()
    }

    fn kind(&self) -> &'static str {
        "stub"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize) -> Grid {
        Grid::from_fn(3, h, w, |c, y, x| ((c * 7 + y * 3 + x) % 13) as f64 / 13.0 - 0.5)
    }

    #[test]
    fn splitmix_reference_values() {
        // Reference outputs of SplitMix64 seeded with 0 (successive states).
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
        assert_eq!(splitmix64(0x9E37_79B9_7F4A_7C15), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn grid_dims_and_determinism() {
        let p = StubProvider::new(16, 3).unwrap();
        let t = p.extract_tokens(&image(28, 42)).unwrap();
        assert_eq!(t.levels.len(), 4);
        assert_eq!(t.grid_dims(), (2, 3));
        assert_eq!(t.levels[0].channels(), 16);
        assert_eq!(t, p.extract_tokens(&image(28, 42)).unwrap());
        assert!(p.extract_tokens(&image(28, 30)).is_err());
        assert!(StubProvider::new(0, 1).is_err());
    }

    #[test]
    fn sensitive_to_content_and_seed() {
        let p = StubProvider::new(8, 1).unwrap();
        let a = image(28, 28);
        let mut b = a.clone();
        b.set(1, 20, 3, b.get(1, 20, 3) + 1e-9);
        assert_ne!(p.extract_tokens(&a).unwrap(), p.extract_tokens(&b).unwrap());
        let q = StubProvider::new(8, 2).unwrap();
        assert_ne!(p.extract_tokens(&a).unwrap(), q.extract_tokens(&a).unwrap());
    }

    #[test]
    fn levels_differ_and_values_bounded() {
        let p = StubProvider::new(8, 1).unwrap();
        let t = p.extract_tokens(&image(56, 56)).unwrap();
        assert_ne!(t.levels[0], t.levels[1]);
        for l in &t.levels {
            assert!(l.data().iter().all(|v| v.abs() <= 1.0));
        }
    }
}
