//! Brightness, contrast, saturation and hue, always applied in that order.
//! Each stage works in floating point and rounds/clamps back to 8 bits.

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{FloatRange, PhotometricConfig};
use super::rng::RngStream;
use super::transform::symmetric;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotometricParams {
    pub brightness_delta: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue_deg: f64,
}

impl PhotometricParams {
    pub const IDENTITY: PhotometricParams = PhotometricParams {
        brightness_delta: 0.0,
        contrast: 1.0,
        saturation: 1.0,
        hue_deg: 0.0,
    };

    pub fn sample(cfg: &PhotometricConfig, rng: &mut RngStream) -> Self {
        let brightness_delta = symmetric(rng, cfg.brightness_delta);
        let contrast = in_range(rng, cfg.contrast);
        let saturation = in_range(rng, cfg.saturation);
        let hue_deg = symmetric(rng, cfg.hue_deg);
        Self { brightness_delta, contrast, saturation, hue_deg }
    }
}

fn in_range(rng: &mut RngStream, r: FloatRange) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.random_range(r.0..=r.1)
    }
}

/// Round half away from zero, then clamp to 8 bits. Avoids `f64::round`,
/// which is a libm call on baseline x86_64.
pub(crate) fn to_u8(v: f64) -> u8 {
    if v <= 0.0 {
        0
    } else if v >= 255.0 {
        255
    } else {
        (v + 0.5) as u8
    }
}

fn wrap_degrees(mut h: f64) -> f64 {
    while h >= 360.0 {
        h -= 360.0;
    }
    while h < 0.0 {
        h += 360.0;
    }
    h
}

fn luma(p: [u8; 3]) -> f64 {
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}

pub fn adjust_brightness(img: &mut RgbImage, delta: f64) {
    if delta == 0.0 {
        return;
    }
    for p in img.pixels_mut() {
        p.0 = p.0.map(|c| to_u8(c as f64 + delta));
    }
}

/// Scales each channel's distance from the mean image luma.
pub fn adjust_contrast(img: &mut RgbImage, factor: f64) {
    if factor == 1.0 || img.is_empty() {
        return;
    }
    let mean = img.pixels().map(|p| luma(p.0)).sum::<f64>() / (img.width() as f64 * img.height() as f64);
    for p in img.pixels_mut() {
        p.0 = p.0.map(|c| to_u8(mean + factor * (c as f64 - mean)));
    }
}

/// Scales each channel's distance from the pixel's own luma.
pub fn adjust_saturation(img: &mut RgbImage, factor: f64) {
    if factor == 1.0 {
        return;
    }
    for p in img.pixels_mut() {
        let g = luma(p.0);
        p.0 = p.0.map(|c| to_u8(g + factor * (c as f64 - g)));
    }
}

/// Rotates hue in HSV space by `degrees`.
pub fn adjust_hue(img: &mut RgbImage, degrees: f64) {
    if degrees == 0.0 {
        return;
    }
    for p in img.pixels_mut() {
        let (h, s, v) = rgb_to_hsv(p.0);
        *p = Rgb(hsv_to_rgb(wrap_degrees(h + degrees), s, v));
    }
}

fn rgb_to_hsv(p: [u8; 3]) -> (f64, f64, f64) {
    let [r, g, b] = p.map(|c| c as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        let t = (g - b) / d;
        60.0 * if t < 0.0 { t + 6.0 } else { t }
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let sector = hp as u32;
    let f = hp - sector as f64;
    let x = c * if sector.is_multiple_of(2) { f } else { 1.0 - f };
    let (r, g, b) = match sector {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|ch| to_u8((ch + m) * 255.0))
}

pub fn apply_photometric_params(img: &mut RgbImage, params: &PhotometricParams) {
    adjust_brightness(img, params.brightness_delta);
    adjust_contrast(img, params.contrast);
    adjust_saturation(img, params.saturation);
    adjust_hue(img, params.hue_deg);
}

/// Draws parameters from `cfg` and applies all four distortions.
pub fn apply_photometric(img: &mut RgbImage, cfg: &PhotometricConfig, rng: &mut RngStream) -> PhotometricParams {
    let params = PhotometricParams::sample(cfg, rng);
    apply_photometric_params(img, &params);
    params
}

#[cfg(test)]
mod tests {
    use super::*;

    fn colorful() -> RgbImage {
        RgbImage::from_fn(32, 16, |x, y| Rgb([(x * 8) as u8, (y * 16) as u8, ((x * y) % 256) as u8]))
    }

    #[test]
    fn identity_params_leave_image_unchanged() {
        let mut img = colorful();
        apply_photometric_params(&mut img, &PhotometricParams::IDENTITY);
        assert_eq!(img, colorful());
    }

    #[test]
    fn brightness_is_additive() {
        let mut img = RgbImage::from_pixel(8, 8, Rgb([100, 100, 100]));
        adjust_brightness(&mut img, 10.0);
        assert!(img.pixels().all(|p| p.0 == [110, 110, 110]));
    }

    #[test]
    fn brightness_clamps() {
        let mut img = RgbImage::from_pixel(2, 2, Rgb([250, 3, 128]));
        adjust_brightness(&mut img, 10.0);
        assert_eq!(img.get_pixel(0, 0).0, [255, 13, 138]);
        adjust_brightness(&mut img, -20.0);
        assert_eq!(img.get_pixel(0, 0).0, [235, 0, 118]);
    }

    #[test]
    fn hsv_round_trip_exact_on_all_hues() {
        for r in (0..=255).step_by(5) {
            for g in (0..=255).step_by(15) {
                for b in (0..=255).step_by(17) {
                    let p = [r as u8, g as u8, b as u8];
                    let (h, s, v) = rgb_to_hsv(p);
                    assert_eq!(hsv_to_rgb(h, s, v), p);
                }
            }
        }
    }

    #[test]
    fn hue_full_turn_is_identity() {
        let mut img = colorful();
        adjust_hue(&mut img, 360.0);
        assert_eq!(img, colorful());
    }

    #[test]
    fn zero_saturation_is_gray() {
        let mut img = colorful();
        adjust_saturation(&mut img, 0.0);
        assert!(img.pixels().all(|p| p.0[0] == p.0[1] && p.0[1] == p.0[2]));
    }
}
