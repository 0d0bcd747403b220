use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mask::{body_region_mask, BODY_THRESHOLD};
use super::Image;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Per-side jitter of the crop box, as a fraction of the box size.
    pub crop_jitter_frac: f32,
    pub rotation_deg_max: f32,
    /// Applied independently on both axes.
    pub shear_deg_max: f32,
    pub hflip_prob: f64,
    /// Additive shift, as a fraction of the `[0, 1]` dynamic range.
    pub intensity_shift_max: f32,
    pub intensity_scale_range: (f32, f32),
    pub body_mask_enabled: bool,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            crop_jitter_frac: 0.05,
            rotation_deg_max: 10.0,
            shear_deg_max: 5.0,
            hflip_prob: 0.5,
            intensity_shift_max: 0.1,
            intensity_scale_range: (0.9, 1.1),
            body_mask_enabled: true,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// No geometric or photometric change and no masking.
    pub fn identity() -> Self {
        AugmentationConfig {
            crop_jitter_frac: 0.0,
            rotation_deg_max: 0.0,
            shear_deg_max: 0.0,
            hflip_prob: 0.0,
            intensity_shift_max: 0.0,
            intensity_scale_range: (1.0, 1.0),
            body_mask_enabled: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.intensity_scale_range;
        let ranges = [
            self.crop_jitter_frac,
            self.rotation_deg_max,
            self.shear_deg_max,
            self.intensity_shift_max,
            lo,
            hi,
        ];
        if ranges.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Argument("augmentation ranges must be finite and non-negative".into()));
        }
        if lo > hi {
            return Err(Error::Argument(format!("intensity scale range ({lo}, {hi}) has lo > hi")));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Argument("hflip_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Random state for one sample, independent of worker scheduling.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch << 32) ^ index);
    rng
}

fn symmetric(rng: &mut ChaCha8Rng, max: f32) -> f32 {
    if max == 0.0 {
        0.0
    } else {
        rng.random_range(-max..=max)
    }
}

/// Rotation by `angle` and shear `(sx, sy)` about the image center, sampled
/// by inverse mapping; uncovered pixels read as background 0.
fn affine(img: &Image, angle_deg: f32, shear_x_deg: f32, shear_y_deg: f32) -> Image {
    if angle_deg == 0.0 && shear_x_deg == 0.0 && shear_y_deg == 0.0 {
        return img.clone();
    }
    let (s, c) = angle_deg.to_radians().sin_cos();
    let kx = shear_x_deg.to_radians().tan();
    let ky = shear_y_deg.to_radians().tan();
    // forward map A = R * S with S = [[1, kx], [ky, 1]]
    let a = [[c - s * ky, c * kx - s], [s + c * ky, s * kx + c]];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
    let (cx, cy) = (img.width as f32 / 2.0, img.height as f32 / 2.0);
    let mut out = Image::new(img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            let sx = inv[0][0] * dx + inv[0][1] * dy + cx;
            let sy = inv[1][0] * dx + inv[1][1] * dy + cy;
            out.set(x, y, img.sample(sx, sy));
        }
    }
    out
}

/// Augments one slice and resamples it to `width x height`.
///
/// Order: body mask, crop-box jitter + resize, rotation, shear, horizontal
/// flip, intensity scale and shift, clamp to `[0, 1]`. Every random draw
/// comes from `rng`, so equal states give bitwise-equal outputs.
pub fn augment_sample(
    img: &Image,
    config: &AugmentationConfig,
    rng: &mut ChaCha8Rng,
    width: usize,
    height: usize,
) -> Image {
    let (mut x0, mut y0, mut x1, mut y1) = (0.0, 0.0, img.width as f32, img.height as f32);
    let masked;
    let base = if config.body_mask_enabled {
        let m = body_region_mask(img, BODY_THRESHOLD);
        if let Some((bx0, by0, bx1, by1)) = m.bbox() {
            (x0, y0, x1, y1) = (bx0 as f32, by0 as f32, bx1 as f32, by1 as f32);
        }
        masked = m.image;
        &masked
    } else {
        img
    };

    let j = config.crop_jitter_frac;
    let (bw, bh) = (x1 - x0, y1 - y0);
    x0 += symmetric(rng, j) * bw;
    x1 += symmetric(rng, j) * bw;
    y0 += symmetric(rng, j) * bh;
    y1 += symmetric(rng, j) * bh;
    if x1 - x0 < 1.0 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1.0 {
        y1 = y0 + 1.0;
    }
    let cropped = base.crop_resize((x0, y0, x1, y1), width, height);

    let angle = symmetric(rng, config.rotation_deg_max);
    let shear_x = symmetric(rng, config.shear_deg_max);
    let shear_y = symmetric(rng, config.shear_deg_max);
    let mut out = affine(&cropped, angle, shear_x, shear_y);

    if config.hflip_prob > 0.0 && rng.random_bool(config.hflip_prob) {
        out = out.flip_horizontal();
    }

    let (lo, hi) = config.intensity_scale_range;
    let scale = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let shift = symmetric(rng, config.intensity_shift_max);
    if scale != 1.0 || shift != 0.0 {
        for p in &mut out.pixels {
            *p = *p * scale + shift;
        }
    }
    for p in &mut out.pixels {
        *p = p.clamp(0.0, 1.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(w: usize, h: usize) -> Image {
        let px = (0..w * h).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        Image::from_pixels(w, h, px).unwrap()
    }

    #[test]
    fn identity_config_is_identity_after_resize() {
        let img = gradient_image(16, 12);
        let mut rng = sample_rng(1, 0, 0);
        let out = augment_sample(&img, &AugmentationConfig::identity(), &mut rng, 16, 12);
        assert_eq!(out, img);
        let out = augment_sample(&img, &AugmentationConfig::identity(), &mut rng, 8, 6);
        assert_eq!(out, img.resize(8, 6));
    }

    #[test]
    fn same_state_same_output() {
        let img = gradient_image(20, 20);
        let cfg = AugmentationConfig::default();
        let a = augment_sample(&img, &cfg, &mut sample_rng(3, 1, 2), 16, 16);
        let b = augment_sample(&img, &cfg, &mut sample_rng(3, 1, 2), 16, 16);
        let c = augment_sample(&img, &cfg, &mut sample_rng(3, 1, 3), 16, 16);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn validation_rejects_inverted_scale() {
        let cfg = AugmentationConfig {
            intensity_scale_range: (1.2, 0.8),
            ..AugmentationConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(AugmentationConfig::default().validate().is_ok());
    }
}
