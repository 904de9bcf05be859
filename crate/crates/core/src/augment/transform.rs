//! Geometric transforms applied identically to pixels and instance masks.
//!
//! All warps are inverse-mapped: each output pixel center is taken back to the
//! source frame. Pixels are sampled bilinearly with black outside the source;
//! masks are sampled nearest-neighbor (`floor` of the source point).

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{AugmentConfig, GeometricConfig, ResizeConfig};
use super::rng::RngStream;
use super::photometric::to_u8;
use super::Scene;
use crate::mask::{self, BinaryMask};

/// `x' = a·x + b·y + c`, `y' = d·x + e·y + f`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine { a: 1.0, b: 0.0, c: 0.0, d: 0.0, e: 1.0, f: 0.0 };

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.a * x + self.b * y + self.c, self.d * x + self.e * y + self.f)
    }

    pub fn inverse(&self) -> Affine {
        let det = self.a * self.e - self.b * self.d;
        let (a, b, d, e) = (self.e / det, -self.b / det, -self.d / det, self.a / det);
        Affine {
            a,
            b,
            c: -(a * self.c + b * self.f),
            d,
            e,
            f: -(d * self.c + e * self.f),
        }
    }

    /// `self` applied after `first`.
    pub fn after(&self, first: &Affine) -> Affine {
        Affine {
            a: self.a * first.a + self.b * first.d,
            b: self.a * first.b + self.b * first.e,
            c: self.a * first.c + self.b * first.f + self.c,
            d: self.d * first.a + self.e * first.d,
            e: self.d * first.b + self.e * first.e,
            f: self.d * first.c + self.e * first.f + self.f,
        }
    }

    pub fn translate(dx: f64, dy: f64) -> Affine {
        Affine { c: dx, f: dy, ..Self::IDENTITY }
    }

    /// Counter-clockwise on screen (y down) rotation by `degrees` about `(cx, cy)`.
    pub fn rotate_about(degrees: f64, cx: f64, cy: f64) -> Affine {
        let (s, c) = degrees.to_radians().sin_cos();
        let r = Affine { a: c, b: s, c: 0.0, d: -s, e: c, f: 0.0 };
        Affine::translate(cx, cy).after(&r.after(&Affine::translate(-cx, -cy)))
    }

    /// Horizontal shear `x' = x + k·(y − cy)`.
    pub fn shear_about(k: f64, cy: f64) -> Affine {
        Affine { a: 1.0, b: k, c: -k * cy, d: 0.0, e: 1.0, f: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum GeometricOp {
    Shear { factor: f64 },
    Rotate { degrees: f64 },
    Translate { dx: f64, dy: f64 },
}

impl GeometricOp {
    /// Picks one op uniformly, then its parameter from the configured magnitudes.
    pub fn sample(cfg: &GeometricConfig, width: u32, height: u32, rng: &mut RngStream) -> Self {
        match rng.random_range(0..3u8) {
            0 => GeometricOp::Shear { factor: symmetric(rng, cfg.shear) },
            1 => GeometricOp::Rotate { degrees: symmetric(rng, cfg.rotate_deg) },
            _ => GeometricOp::Translate {
                dx: symmetric(rng, cfg.translate_frac) * width as f64,
                dy: symmetric(rng, cfg.translate_frac) * height as f64,
            },
        }
    }

    /// Forward map for an image of the given size (rotation and shear act about the center).
    pub fn affine(&self, width: u32, height: u32) -> Affine {
        let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
        match *self {
            GeometricOp::Shear { factor } => Affine::shear_about(factor, cy),
            GeometricOp::Rotate { degrees } => Affine::rotate_about(degrees, cx, cy),
            GeometricOp::Translate { dx, dy } => Affine::translate(dx, dy),
        }
    }
}

pub(crate) fn symmetric(rng: &mut RngStream, magnitude: f64) -> f64 {
    if magnitude == 0.0 {
        0.0
    } else {
        rng.random_range(-magnitude..=magnitude)
    }
}

fn floor_i64(v: f64) -> i64 {
    let i = v as i64;
    if (i as f64) > v {
        i - 1
    } else {
        i
    }
}

/// Resamples `src` onto a `out_w × out_h` canvas. `inverse` maps output coordinates
/// to source coordinates; output pixels outside `[0, valid.0) × [0, valid.1)` stay black.
pub fn warp_image(src: &RgbImage, inverse: &Affine, out_w: u32, out_h: u32, valid: (u32, u32)) -> RgbImage {
    let mut out = RgbImage::new(out_w, out_h);
    let (sw, sh) = (src.width() as i64, src.height() as i64);
    let data = src.as_raw();
    let stride = sw as usize * 3;
    let fetch = |x: i64, y: i64| -> [f64; 3] {
        if x < 0 || y < 0 || x >= sw || y >= sh {
            [0.0; 3]
        } else {
            let i = y as usize * stride + x as usize * 3;
            [data[i] as f64, data[i + 1] as f64, data[i + 2] as f64]
        }
    };
    let out_stride = out_w as usize * 3;
    let buf: &mut [u8] = &mut out;
    for y in 0..out_h.min(valid.1) {
        for x in 0..out_w.min(valid.0) {
            let (sx, sy) = inverse.apply(x as f64 + 0.5, y as f64 + 0.5);
            let (fx, fy) = (sx - 0.5, sy - 0.5);
            let (x0, y0) = (floor_i64(fx), floor_i64(fy));
            if x0 < -1 || y0 < -1 || x0 >= sw || y0 >= sh {
                continue;
            }
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            let (p00, p10, p01, p11) = if x0 >= 0 && y0 >= 0 && x0 + 1 < sw && y0 + 1 < sh {
                let i = y0 as usize * stride + x0 as usize * 3;
                let j = i + stride;
                let px = |k: usize| [data[k] as f64, data[k + 1] as f64, data[k + 2] as f64];
                (px(i), px(i + 3), px(j), px(j + 3))
            } else {
                (fetch(x0, y0), fetch(x0 + 1, y0), fetch(x0, y0 + 1), fetch(x0 + 1, y0 + 1))
            };
            let o = y as usize * out_stride + x as usize * 3;
            for ch in 0..3 {
                let top = p00[ch] + (p10[ch] - p00[ch]) * tx;
                let bottom = p01[ch] + (p11[ch] - p01[ch]) * tx;
                buf[o + ch] = to_u8(top + (bottom - top) * ty);
            }
        }
    }
    out
}

/// Nearest-neighbor mask warp. Only the forward image of the source foreground
/// box is visited.
pub fn warp_mask(
    src: &BinaryMask,
    forward: &Affine,
    inverse: &Affine,
    out_w: u32,
    out_h: u32,
    valid: (u32, u32),
) -> BinaryMask {
    let mut out = BinaryMask::new(out_w, out_h);
    let Some(b) = mask::mask_bbox(src) else {
        return out;
    };
    let corners = [
        forward.apply(b.x_min, b.y_min),
        forward.apply(b.x_max, b.y_min),
        forward.apply(b.x_min, b.y_max),
        forward.apply(b.x_max, b.y_max),
    ];
    let lo_x = corners.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    let hi_x = corners.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
    let lo_y = corners.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let hi_y = corners.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let clamp = |v: f64, hi: u32| v.clamp(0.0, hi as f64) as u32;
    let (x0, x1) = (clamp(lo_x.floor() - 2.0, out_w.min(valid.0)), clamp(hi_x.ceil() + 2.0, out_w.min(valid.0)));
    let (y0, y1) = (clamp(lo_y.floor() - 2.0, out_h.min(valid.1)), clamp(hi_y.ceil() + 2.0, out_h.min(valid.1)));
    let (sw, sh) = (src.width() as f64, src.height() as f64);
    for y in y0..y1 {
        for x in x0..x1 {
            let (sx, sy) = inverse.apply(x as f64 + 0.5, y as f64 + 0.5);
            if sx < 0.0 || sy < 0.0 || sx >= sw || sy >= sh {
                continue;
            }
            // both non-negative here, so truncation is floor
            if src.get(sx as u32, sy as u32) {
                out.set(x, y, true);
            }
        }
    }
    out
}

/// Applies `forward` to the scene image and every instance mask, dropping
/// instances that end up empty. Canvas size is unchanged.
pub fn apply_affine(scene: &mut Scene, forward: &Affine) {
    let (w, h) = scene.image.dimensions();
    let inverse = forward.inverse();
    scene.image = warp_image(&scene.image, &inverse, w, h, (w, h));
    for inst in &mut scene.instances {
        inst.mask = warp_mask(&inst.mask, forward, &inverse, w, h, (w, h));
    }
    scene.instances.retain(|i| !i.mask.is_empty());
}

pub fn apply_geometric_op(scene: &mut Scene, op: &GeometricOp) {
    let (w, h) = scene.image.dimensions();
    apply_affine(scene, &op.affine(w, h));
}

/// Draws one of shear, rotate, translate and applies it. Returns the op used.
pub fn apply_geometric(scene: &mut Scene, config: &AugmentConfig, rng: &mut RngStream) -> GeometricOp {
    let (w, h) = scene.image.dimensions();
    let op = GeometricOp::sample(&config.geometric, w, h, rng);
    apply_geometric_op(scene, &op);
    op
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResizePlan {
    pub short_side: u32,
    pub scale: f64,
    /// Scaled size before cropping.
    pub scaled: (u32, u32),
    /// Top-left corner of the crop window in the scaled frame.
    pub offset: (u32, u32),
    /// Crop window size; anything beyond it up to the target is padding.
    pub window: (u32, u32),
}

pub fn plan_resize(width: u32, height: u32, cfg: &ResizeConfig, rng: &mut RngStream) -> ResizePlan {
    let short_side = rng.random_range(cfg.short_side.min()..=cfg.short_side.max());
    let (short, long) = (width.min(height) as f64, width.max(height) as f64);
    let scale = (short_side as f64 / short).min(cfg.long_side_max as f64 / long);
    let scaled = (
        ((width as f64 * scale).round() as u32).max(1),
        ((height as f64 * scale).round() as u32).max(1),
    );
    let (tw, th) = cfg.target;
    let window = (scaled.0.min(tw), scaled.1.min(th));
    let offset = (
        rng.random_range(0..=scaled.0 - window.0),
        rng.random_range(0..=scaled.1 - window.1),
    );
    ResizePlan { short_side, scale, scaled, offset, window }
}

pub fn apply_resize_plan(scene: &mut Scene, plan: &ResizePlan, target: (u32, u32)) {
    let forward = Affine {
        a: plan.scale,
        b: 0.0,
        c: -(plan.offset.0 as f64),
        d: 0.0,
        e: plan.scale,
        f: -(plan.offset.1 as f64),
    };
    let inverse = forward.inverse();
    let (tw, th) = target;
    scene.image = warp_image(&scene.image, &inverse, tw, th, plan.window);
    for inst in &mut scene.instances {
        inst.mask = warp_mask(&inst.mask, &forward, &inverse, tw, th, plan.window);
    }
    scene.instances.retain(|i| !i.mask.is_empty());
}

/// Random isotropic rescale, random crop, and black bottom/right padding to the target size.
pub fn resize_crop_pad(scene: &mut Scene, config: &AugmentConfig, rng: &mut RngStream) -> ResizePlan {
    let (w, h) = scene.image.dimensions();
    let plan = plan_resize(w, h, &config.resize, rng);
    apply_resize_plan(scene, &plan, config.resize.target);
    plan
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use crate::augment::config::IntRange;
    use crate::augment::Instance;

    fn scene_with_square(w: u32, h: u32, side: u32) -> Scene {
        let (x0, y0) = ((w - side) / 2, (h - side) / 2);
        let m = BinaryMask::from_fn(w, h, |x, y| (x0..x0 + side).contains(&x) && (y0..y0 + side).contains(&y));
        Scene {
            image_id: 1,
            file_name: "1_a.png".into(),
            image: RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7 % 256) as u8, (y * 3 % 256) as u8, 99])),
            instances: vec![Instance::new(Some(1), 1, m)],
        }
    }

    #[test]
    fn affine_inverse_round_trip() {
        let f = Affine::rotate_about(17.0, 40.0, 30.0).after(&Affine::shear_about(0.1, 5.0));
        let inv = f.inverse();
        let (x, y) = inv.apply(f.apply(12.5, -3.0).0, f.apply(12.5, -3.0).1);
        assert!((x - 12.5).abs() < 1e-9 && (y + 3.0).abs() < 1e-9);
    }

    #[test]
    fn zero_translate_is_identity() {
        let mut s = scene_with_square(40, 30, 10);
        let before = s.clone();
        apply_geometric_op(&mut s, &GeometricOp::Translate { dx: 0.0, dy: 0.0 });
        assert_eq!(s.image, before.image);
        assert_eq!(s.instances, before.instances);
    }

    #[test]
    fn integer_translate_shifts_mask() {
        let mut s = scene_with_square(40, 30, 10);
        apply_geometric_op(&mut s, &GeometricOp::Translate { dx: 3.0, dy: -2.0 });
        let b = mask::mask_bbox(&s.instances[0].mask).unwrap();
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (18.0, 8.0, 28.0, 18.0));
    }

    #[test]
    fn rotate_ninety_keeps_square_area() {
        let mut s = scene_with_square(64, 64, 20);
        let area = s.instances[0].mask.area() as f64;
        apply_geometric_op(&mut s, &GeometricOp::Rotate { degrees: 90.0 });
        let after = s.instances[0].mask.area() as f64;
        assert!((after - area).abs() <= 0.02 * area, "{area} -> {after}");
    }

    #[test]
    fn translated_off_canvas_instance_is_removed() {
        let mut s = scene_with_square(40, 30, 10);
        apply_geometric_op(&mut s, &GeometricOp::Translate { dx: 100.0, dy: 0.0 });
        assert!(s.instances.is_empty());
        assert!(s.image.pixels().all(|p| p.0 == [0, 0, 0]));
    }

    #[test]
    fn resize_fixed_point() {
        let mut s = scene_with_square(1920, 1440, 100);
        let before = s.clone();
        let mut cfg = AugmentConfig::default();
        cfg.resize.short_side = IntRange(1440, 1440);
        let plan = resize_crop_pad(&mut s, &cfg, &mut RngStream::from_u64(3));
        assert_eq!(plan.scale, 1.0);
        assert_eq!(plan.offset, (0, 0));
        assert_eq!(s.image, before.image);
        assert_eq!(s.instances, before.instances);
    }

    #[test]
    fn resize_small_image_pads() {
        let mut s = scene_with_square(400, 300, 40);
        let mut cfg = AugmentConfig::default();
        cfg.resize.short_side = IntRange(600, 600);
        let plan = resize_crop_pad(&mut s, &cfg, &mut RngStream::from_u64(3));
        assert_eq!(plan.scaled, (800, 600));
        assert_eq!(s.image.dimensions(), (1920, 1440));
        assert_eq!(s.image.get_pixel(1000, 100).0, [0, 0, 0]);
        let b = mask::mask_bbox(&s.instances[0].mask).unwrap();
        assert_eq!((b.x_min, b.y_min, b.width(), b.height()), (360.0, 260.0, 80.0, 80.0));
    }
}
