//! Pseudo-query augmentation: horizontal flip, brightness/contrast jitter and
//! a small affine warp, applied identically to image and mask.

use rand::Rng;

use crate::encoders::{BinaryMask, ImageSample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_p: f64,
    /// Brightness offset and contrast factor range, `±jitter`.
    pub jitter: f64,
    pub rotate_deg: f64,
    /// Translation as a fraction of the image side.
    pub translate: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { flip_p: 0.5, jitter: 0.2, rotate_deg: 10.0, translate: 0.1 }
    }
}

impl AugmentConfig {
    pub fn flip_only() -> Self {
        Self { flip_p: 1.0, jitter: 0.0, rotate_deg: 0.0, translate: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("finetune.flip_p", (0.0..=1.0).contains(&self.flip_p)),
            ("finetune.jitter", (0.0..1.0).contains(&self.jitter)),
            ("finetune.rotate_deg", (0.0..=180.0).contains(&self.rotate_deg)),
            ("finetune.translate", (0.0..=0.5).contains(&self.translate)),
        ];
        match checks.iter().find(|(_, ok)| !ok) {
            Some((key, _)) => Err(Error::config(*key, "out of range")),
            None => Ok(()),
        }
    }
}

fn symmetric(rng: &mut impl Rng, r: f64) -> f64 {
    if r > 0.0 {
        rng.random_range(-r..=r)
    } else {
        0.0
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

pub fn augment(img: &ImageSample, mask: &BinaryMask, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<(ImageSample, BinaryMask)> {
    let (h, w) = (img.height(), img.width());
    let flip = cfg.flip_p > 0.0 && rng.random_bool(cfg.flip_p);
    let theta = symmetric(rng, cfg.rotate_deg).to_radians();
    let tx = symmetric(rng, cfg.translate) * w as f64;
    let ty = symmetric(rng, cfg.translate) * h as f64;
    let brightness = symmetric(rng, cfg.jitter);
    let contrast = 1.0 + symmetric(rng, cfg.jitter);

    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = theta.sin_cos();
    // output pixel -> source coordinate (inverse warp, then the flip)
    let source = |y: usize, x: usize| {
        let (dy, dx) = (y as f64 - cy - ty, x as f64 - cx - tx);
        let sx = cos * dx + sin * dy + cx;
        let sy = -sin * dx + cos * dy + cy;
        let sx = if flip { w as f64 - 1.0 - sx } else { sx };
        (sy, sx)
    };

    let mut pixels = vec![0.0; 3 * h * w];
    let mut mask_out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = source(y, x);
            for c in 0..3 {
                pixels[(c * h + y) * w + x] = bilinear(img, c, sy, sx);
            }
            let (ny, nx) = (sy.round(), sx.round());
            if ny >= 0.0 && nx >= 0.0 && (ny as usize) < h && (nx as usize) < w {
                mask_out[y * w + x] = u8::from(mask.get(ny as usize, nx as usize));
            }
        }
    }
    if brightness != 0.0 || contrast != 1.0 {
        let mean = pixels.iter().sum::<f64>() / pixels.len() as f64;
        pixels.iter_mut().for_each(|v| *v = (*v - mean) * contrast + mean + brightness);
    }
    pixels.iter_mut().for_each(|v| *v = quantize(*v));
    Ok((ImageSample::new(h, w, pixels, &img.category, &img.domain_tag)?, BinaryMask::new(h, w, mask_out)?))
}

/// Border-replicating bilinear sample.
fn bilinear(img: &ImageSample, c: usize, y: f64, x: f64) -> f64 {
    let (h, w) = (img.height() as f64, img.width() as f64);
    let y = y.clamp(0.0, h - 1.0);
    let x = x.clamp(0.0, w - 1.0);
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as usize, x0 as usize);
    let y1 = (y0 + 1).min(img.height() - 1);
    let x1 = (x0 + 1).min(img.width() - 1);
    let top = img.at(c, y0, x0) * (1.0 - fx) + img.at(c, y0, x1) * fx;
    let bottom = img.at(c, y1, x0) * (1.0 - fx) + img.at(c, y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> (ImageSample, BinaryMask) {
        let (h, w) = (6, 8);
        let px = (0..3 * h * w).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
        (ImageSample::new(h, w, px, "red disk", "src").unwrap(), BinaryMask::from_fn(h, w, |y, x| x < 3 && y > 1))
    }

    #[test]
    fn flip_only_mirrors_image_and_mask() {
        let (img, mask) = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, m) = augment(&img, &mask, &AugmentConfig::flip_only(), &mut rng).unwrap();
        for y in 0..6 {
            for x in 0..8 {
                assert_eq!(m.get(y, x), mask.get(y, 7 - x));
                for c in 0..3 {
                    assert_eq!(a.at(c, y, x), img.at(c, y, 7 - x));
                }
            }
        }
    }

    #[test]
    fn seeded_and_in_range() {
        let (img, mask) = sample();
        let cfg = AugmentConfig::default();
        let a = augment(&img, &mask, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = augment(&img, &mask, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert!(a.0.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        assert!(AugmentConfig { flip_p: 1.5, ..Default::default() }.validate().is_err());
    }
}
