use ndarray::{s, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::{ImageTensor, NORM_MEAN, NORM_STD};
use super::Modality;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub erase_prob: f64,
    pub gray_prob: f64,
    /// Visible images only.
    pub channel_aug_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            erase_prob: 0.5,
            gray_prob: 0.1,
            channel_aug_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip_prob: 0.0,
            erase_prob: 0.0,
            gray_prob: 0.0,
            channel_aug_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("erase_prob", self.erase_prob),
            ("gray_prob", self.gray_prob),
            ("channel_aug_prob", self.channel_aug_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0,1], got {p}")));
            }
        }
        Ok(())
    }
}

/// Resize, flip, channel augmentation (VIS only), grayscale, random erasing,
/// in that order. Probabilities outside `[0,1]` are clamped.
pub fn augment<R: Rng + ?Sized>(
    img: &ImageTensor,
    modality: Modality,
    cfg: &AugmentConfig,
    size: (usize, usize),
    rng: &mut R,
) -> ImageTensor {
    let chance = |rng: &mut R, p: f64| rng.random_bool(p.clamp(0.0, 1.0));
    let mut out = img.resize(size.0, size.1);
    if chance(rng, cfg.flip_prob) {
        let mut d = out.into_data();
        d.invert_axis(Axis(2));
        out = ImageTensor::from_array_unchecked(d.as_standard_layout().into_owned());
    }
    if modality == Modality::Vis && chance(rng, cfg.channel_aug_prob) {
        let c = rng.random_range(0..3);
        out = channel_replicate(&out, c);
    }
    if chance(rng, cfg.gray_prob) {
        out = grayscale(&out);
    }
    if chance(rng, cfg.erase_prob) {
        random_erase(&mut out, rng);
    }
    out
}

/// Copy channel `c` into all three channels.
pub fn channel_replicate(img: &ImageTensor, c: usize) -> ImageTensor {
    let mut out = img.clone();
    let src = img.data().index_axis(Axis(0), c).to_owned();
    for k in 0..3 {
        out.data_mut().index_axis_mut(Axis(0), k).assign(&src);
    }
    out
}

/// Luma in pixel space, written back to every channel in normalised space.
pub fn grayscale(img: &ImageTensor) -> ImageTensor {
    let d = img.data();
    let (_, h, w) = d.dim();
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| d[[c, y, x]] * NORM_STD[c] + NORM_MEAN[c];
            let g = 0.299 * px(0) + 0.587 * px(1) + 0.114 * px(2);
            for c in 0..3 {
                out.data_mut()[[c, y, x]] = (g - NORM_MEAN[c]) / NORM_STD[c];
            }
        }
    }
    out
}

/// Zero (the dataset mean) a random rectangle covering 2–40 % of the image
/// with aspect ratio in [0.3, 3.3]. Leaves the image untouched if no
/// rectangle fits after 100 attempts.
pub fn random_erase<R: Rng + ?Sized>(img: &mut ImageTensor, rng: &mut R) {
    let (h, w) = (img.height(), img.width());
    let area = (h * w) as f64;
    for _ in 0..100 {
        let target = area * rng.random_range(0.02..0.4);
        let ratio = rng.random_range(0.3f64.ln()..3.3f64.ln()).exp();
        let eh = (target * ratio).sqrt().round() as usize;
        let ew = (target / ratio).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        let y0 = rng.random_range(0..=h - eh);
        let x0 = rng.random_range(0..=w - ew);
        img.data_mut()
            .slice_mut(s![.., y0..y0 + eh, x0..x0 + ew])
            .fill(0.0);
        return;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(h: usize, w: usize) -> ImageTensor {
        ImageTensor::new(Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            (c as f32 - 1.0) * 0.7 + (y as f32 * 0.13).sin() + x as f32 * 0.05
        }))
        .unwrap()
    }

    #[test]
    fn zero_probabilities_only_resize() {
        let img = sample(20, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = augment(
            &img,
            Modality::Vis,
            &AugmentConfig::none(),
            (16, 8),
            &mut rng,
        );
        assert_eq!(out, img.resize(16, 8));
    }

    #[test]
    fn channel_aug_never_touches_infrared() {
        let img = sample(8, 4);
        let cfg = AugmentConfig {
            channel_aug_prob: 1.0,
            ..AugmentConfig::none()
        };
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(augment(&img, Modality::Ir, &cfg, (8, 4), &mut rng), img);
        }
    }

    #[test]
    fn channel_aug_replicates_the_chosen_channel() {
        let img = sample(8, 4);
        let cfg = AugmentConfig {
            channel_aug_prob: 1.0,
            ..AugmentConfig::none()
        };
        // Find a seed whose draw picks channel 0, mirroring the sampler's
        // draw sequence: flip coin, channel coin, channel index.
        let seed = (0..1000)
            .find(|&s| {
                let mut r = ChaCha8Rng::seed_from_u64(s);
                let _ = r.random_bool(0.0);
                let _ = r.random_bool(1.0);
                r.random_range(0..3) == 0
            })
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = augment(&img, Modality::Vis, &cfg, (8, 4), &mut rng);
        for c in 0..3 {
            assert_eq!(
                out.data().index_axis(Axis(0), c),
                img.data().index_axis(Axis(0), 0)
            );
        }
    }

    #[test]
    fn grayscale_channels_share_pixel_value() {
        let g = grayscale(&sample(4, 4)).to_rgb8();
        for p in g.pixels() {
            assert!((p[0] as i32 - p[1] as i32).abs() <= 1);
            assert!((p[1] as i32 - p[2] as i32).abs() <= 1);
        }
    }

    #[test]
    fn invalid_probability_is_a_config_error() {
        let cfg = AugmentConfig {
            erase_prob: 1.5,
            ..AugmentConfig::none()
        };
        assert!(cfg.validate().is_err());
    }
}
