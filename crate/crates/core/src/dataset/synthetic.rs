//! Procedural two-modality pedestrians.
//!
//! Each identity has a fixed appearance (torso colour and stripe count, leg
//! colour and pattern, hair tone) that depends only on its index, so
//! different seeds render the same people under different nuisance draws.
//! Visible images are coloured; infrared images keep the luminance layout
//! with contrast compressed towards mid-gray (`0.8·gray + 0.2·128`). Every feature is mirror
//! symmetric so horizontal flips do not change identity.

use std::path::{Path, PathBuf};

use ::image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Manifest, Modality, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_ids: usize,
    pub per_id: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_ids < 2 {
            return Err(Error::Config(
                "synthetic data needs at least 2 identities".into(),
            ));
        }
        if self.per_id < 2 {
            return Err(Error::Config(
                "synthetic data needs at least 2 images per identity and modality".into(),
            ));
        }
        if self.height < 8 || self.width < 4 {
            return Err(Error::Config(
                "synthetic images must be at least 8×4".into(),
            ));
        }
        Ok(())
    }
}

// Torso colours span the luminance range so the infrared rendering keeps
// them apart.
const TORSO: [[u8; 3]; 5] = [
    [40, 50, 120],
    [170, 70, 60],
    [90, 160, 90],
    [220, 180, 90],
    [200, 225, 230],
];

const LEGS: [[u8; 3]; 7] = [
    [30, 30, 35],
    [50, 60, 110],
    [120, 80, 50],
    [190, 175, 130],
    [80, 105, 150],
    [225, 225, 220],
    [110, 120, 60],
];

const HAIR: [[u8; 3]; 3] = [[20, 20, 20], [110, 70, 40], [220, 200, 130]];

struct Look {
    torso: [u8; 3],
    stripes: usize,
    legs: [u8; 3],
    leg_pattern: usize,
    hair: [u8; 3],
}

fn look(id: usize) -> Look {
    Look {
        torso: TORSO[id % 5],
        stripes: id % 4,
        legs: LEGS[(id * 3 + 1) % 7],
        leg_pattern: (id / 4) % 3,
        hair: HAIR[(id / 2) % 3],
    }
}

fn luma(c: [u8; 3]) -> f32 {
    0.299 * c[0] as f32 + 0.587 * c[1] as f32 + 0.114 * c[2] as f32
}

fn contrast(c: [u8; 3]) -> [u8; 3] {
    if luma(c) > 128.0 {
        [25, 25, 25]
    } else {
        [235, 235, 235]
    }
}

/// Palette colour at half saturation, scaled by `f`.
fn shade(c: [u8; 3], f: f32) -> [f32; 3] {
    let l = luma(c);
    std::array::from_fn(|i| (l + 0.5 * (c[i] as f32 - l)) * f)
}

fn image_rng(seed: u64, id: usize, modality: Modality, index: usize) -> ChaCha8Rng {
    let key = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ ((id as u64) << 24)
        ^ ((modality.index() as u64) << 20)
        ^ index as u64;
    ChaCha8Rng::seed_from_u64(key)
}

/// Render image `index` of identity `id` in one modality.
pub fn render_identity(
    id: usize,
    modality: Modality,
    index: usize,
    cfg: &SyntheticConfig,
) -> RgbImage {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = image_rng(cfg.seed, id, modality, index);
    let look = look(id);

    let backdrop = |rng: &mut ChaCha8Rng| -> [f32; 3] {
        let level = rng.random_range(95.0..125.0);
        std::array::from_fn(|_| level + rng.random_range(-8.0..8.0))
    };
    let bg_top = backdrop(&mut rng);
    let bg_bottom = backdrop(&mut rng);
    let dy = rng.random_range(-0.04..0.04) * h as f32;
    let dx = rng.random_range(-0.06..0.06) * w as f32;
    let brightness = rng.random_range(0.9..1.1f32);
    let noise = Normal::new(0.0f32, 6.0).unwrap();

    // Layout in fractions of the frame: (row0, row1, col0, col1).
    let inside = |y: f32, x: f32, r0: f32, r1: f32, c0: f32, c1: f32| {
        let fy = (y - dy) / h as f32;
        let fx = (x - dx) / w as f32;
        fy >= r0 && fy < r1 && fx >= c0 && fx < c1
    };
    let torso_rows = (0.20f32, 0.55f32);
    let stripe_at = |y: f32| {
        let fy = (y - dy) / h as f32;
        (1..=look.stripes).any(|i| {
            let centre =
                torso_rows.0 + (torso_rows.1 - torso_rows.0) * i as f32 / (look.stripes + 1) as f32;
            (fy - centre).abs() < 0.025
        })
    };

    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f32 + 0.5, x as f32 + 0.5);
            let t = y as f32 / h as f32;
            let mut px: [f32; 3] =
                std::array::from_fn(|c| bg_top[c] * (1.0 - t) + bg_bottom[c] * t);
            if inside(yf, xf, 0.05, 0.10, 0.38, 0.62) {
                px = shade(look.hair, 1.0);
            } else if inside(yf, xf, 0.10, 0.20, 0.38, 0.62) {
                px = [215.0, 180.0, 150.0];
            } else if inside(yf, xf, torso_rows.0, torso_rows.1, 0.25, 0.75) {
                px = if stripe_at(yf) {
                    shade(contrast(look.torso), 1.0)
                } else {
                    shade(look.torso, 1.0)
                };
            } else if inside(yf, xf, 0.22, 0.50, 0.16, 0.25)
                || inside(yf, xf, 0.22, 0.50, 0.75, 0.84)
            {
                px = shade(look.torso, 0.8);
            } else if inside(yf, xf, 0.55, 0.93, 0.29, 0.48)
                || inside(yf, xf, 0.55, 0.93, 0.52, 0.71)
            {
                let pattern = match look.leg_pattern {
                    1 => {
                        inside(yf, xf, 0.55, 0.93, 0.29, 0.34)
                            || inside(yf, xf, 0.55, 0.93, 0.66, 0.71)
                    }
                    2 => inside(yf, xf, 0.70, 0.76, 0.0, 1.0),
                    _ => false,
                };
                px = if pattern {
                    shade(contrast(look.legs), 1.0)
                } else {
                    shade(look.legs, 1.0)
                };
            } else if inside(yf, xf, 0.93, 0.97, 0.27, 0.73) {
                px = [35.0, 30.0, 30.0];
            }
            if modality == Modality::Ir {
                let g = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
                px = [0.8 * g + 0.2 * 128.0; 3];
            }
            let n = noise.sample(&mut rng);
            let out: [u8; 3] = std::array::from_fn(|c| {
                let v = if modality == Modality::Ir {
                    px[c] * brightness + n
                } else {
                    px[c] * brightness + noise.sample(&mut rng)
                };
                v.clamp(0.0, 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, Rgb(out));
        }
    }
    img
}

/// Render a dataset under `out_dir/images` and write `out_dir/manifest.csv`.
/// Visible images use cameras 0 and 1, infrared images cameras 2 and 3.
pub fn generate_synthetic(cfg: &SyntheticConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut raw: Vec<(PathBuf, u64, Modality, u32)> = Vec::new();
    for id in 0..cfg.num_ids {
        for modality in Modality::BOTH {
            for j in 0..cfg.per_id {
                let path = images.join(format!("{id:04}_{modality}_{j:03}.png"));
                render_identity(id, modality, j, cfg)
                    .save(&path)
                    .map_err(|e| Error::Image {
                        path: path.clone(),
                        msg: e.to_string(),
                    })?;
                let camera = 2 * modality.index() as u32 + (j % 2) as u32;
                raw.push((path, id as u64, modality, camera));
            }
        }
    }
    let manifest = Manifest::from_raw(raw, Split::Train);
    manifest.save(out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(num_ids: usize, per_id: usize, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            num_ids,
            per_id,
            height: 64,
            width: 32,
            seed,
        }
    }

    #[test]
    fn counts_match_arguments() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic(&cfg(10, 20, 7), dir.path()).unwrap();
        assert_eq!(m.len(), 400);
        assert_eq!((m.n_vis(), m.n_ir()), (200, 200));
        assert_eq!(m.num_identities(), 10);
    }

    #[test]
    fn generation_is_reproducible() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_synthetic(&cfg(3, 2, 11), a.path()).unwrap();
        generate_synthetic(&cfg(3, 2, 11), b.path()).unwrap();
        let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
        assert_eq!(
            read(a.path(), "manifest.csv"),
            read(b.path(), "manifest.csv")
        );
        assert_eq!(
            read(a.path(), "images/0002_IR_001.png"),
            read(b.path(), "images/0002_IR_001.png")
        );
    }

    #[test]
    fn reload_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic(&cfg(4, 2, 1), dir.path()).unwrap();
        let back = super::super::load_manifest(dir.path().join("manifest.csv")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn infrared_is_gray() {
        let img = render_identity(3, Modality::Ir, 0, &cfg(4, 2, 0));
        assert!(img.pixels().all(|p| p[0] == p[1] && p[1] == p[2]));
    }

    #[test]
    fn rejects_degenerate_requests() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_synthetic(&cfg(1, 4, 0), dir.path()).is_err());
        assert!(generate_synthetic(&cfg(4, 1, 0), dir.path()).is_err());
    }

    #[test]
    fn unwritable_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("f");
        std::fs::write(&file, b"x").unwrap();
        let err = generate_synthetic(&cfg(2, 2, 0), file.join("sub")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    fn pixel_distance(a: &RgbImage, b: &RgbImage) -> f64 {
        a.as_raw()
            .iter()
            .zip(b.as_raw())
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum()
    }

    /// Infrared queries against visible gallery by raw-pixel nearest neighbour.
    fn raw_pixel_rank1(c: &SyntheticConfig) -> f64 {
        let mut gallery = Vec::new();
        for id in 0..c.num_ids {
            for j in 0..c.per_id {
                gallery.push((id, render_identity(id, Modality::Vis, j, c)));
            }
        }
        let mut hits = 0;
        let mut total = 0;
        for id in 0..c.num_ids {
            for j in 0..c.per_id {
                let q = render_identity(id, Modality::Ir, j, c);
                let best = gallery
                    .iter()
                    .min_by(|a, b| pixel_distance(&q, &a.1).total_cmp(&pixel_distance(&q, &b.1)))
                    .unwrap();
                hits += usize::from(best.0 == id);
                total += 1;
            }
        }
        hits as f64 / total as f64
    }

    #[test]
    fn identity_is_recoverable_from_raw_pixels() {
        for seed in 0..16 {
            let r1 = raw_pixel_rank1(&cfg(2, 2, seed));
            assert!(r1 > 0.5, "seed {seed}: rank-1 {r1}");
        }
    }
}
