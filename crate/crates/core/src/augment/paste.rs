//! View-specific and person-anchored copy-paste, plus pure-ball recoloring.
//!
//! Placement intervals for a `w × h` frame:
//!
//! | stage            | `x_min`                    | `y_min`                       |
//! |------------------|----------------------------|-------------------------------|
//! | right view       | `[w/5, w]`                 | `[h/2 − h/5, h/2 + h/5]`      |
//! | left view        | `[0, w − w/5]`             | `[h/2 − h/5, h/2 + h/5]`      |
//! | near a person    | `[box.x_min, box.x_max]`   | `[box.y_min, box.y_max]`      |
//!
//! Bounds are real-valued; anchors are drawn uniformly from the integers inside them.

use image::Rgb;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{AugmentConfig, IntRange, PaletteEntry};
use super::rng::RngStream;
use super::{AugmentError, Instance, Scene, TaskCategories, ViewSide};
use crate::bank::{ObjectBank, ObjectPatch};
use crate::mask::{self, Box, MaskError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PasteStage {
    View,
    Interaction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PasteRecord {
    pub stage: PasteStage,
    pub category_id: u64,
    pub bank_index: usize,
    pub source_annotation_id: u64,
    /// Top-left anchor of the patch in the target frame.
    pub position: (i64, i64),
    /// Flat color applied to a pure ball, if any.
    pub recolor: Option<[u8; 3]>,
    /// The person box the anchor was drawn from (interaction stage only).
    pub anchor_box: Option<Box>,
    pub removed_annotations: usize,
}

/// Integer sub-interval of the real interval `[lo, hi]`, if non-empty.
fn integer_span(lo: f64, hi: f64) -> Option<(i64, i64)> {
    let (a, b) = (lo.ceil() as i64, hi.floor() as i64);
    (a <= b).then_some((a, b))
}

/// Real-valued anchor bounds `((x_lo, x_hi), (y_lo, y_hi))` for a view.
pub fn view_bounds(view: ViewSide, w: u32, h: u32) -> ((f64, f64), (f64, f64)) {
    let (w, h) = (w as f64, h as f64);
    let x = match view {
        ViewSide::Right => (w / 5.0, w),
        ViewSide::Left => (0.0, w - w / 5.0),
    };
    (x, (h / 2.0 - h / 5.0, h / 2.0 + h / 5.0))
}

/// Draws a view-constrained anchor, redrawing while the patch rectangle would be
/// entirely off the canvas.
pub fn sample_view_paste_location(
    view: ViewSide,
    w: u32,
    h: u32,
    patch: (u32, u32),
    max_attempts: u32,
    rng: &mut RngStream,
) -> Result<(i64, i64), AugmentError> {
    let ((xl, xh), (yl, yh)) = view_bounds(view, w, h);
    let (Some(xs), Some(ys)) = (integer_span(xl, xh), integer_span(yl, yh)) else {
        return Err(AugmentError::SamplingExhausted { attempts: 0 });
    };
    for _ in 0..max_attempts {
        let x = rng.random_range(xs.0..=xs.1);
        let y = rng.random_range(ys.0..=ys.1);
        let visible = x < w as i64 && y < h as i64 && x + patch.0 as i64 > 0 && y + patch.1 as i64 > 0;
        if visible {
            return Ok((x, y));
        }
    }
    Err(AugmentError::SamplingExhausted { attempts: max_attempts })
}

/// Draws an anchor inside `person_box` (inclusive of both corners).
pub fn sample_interaction_location(person_box: &Box, rng: &mut RngStream) -> (i64, i64) {
    let xs = integer_span(person_box.x_min, person_box.x_max).unwrap_or((person_box.x_min as i64, person_box.x_min as i64));
    let ys = integer_span(person_box.y_min, person_box.y_max).unwrap_or((person_box.y_min as i64, person_box.y_min as i64));
    (rng.random_range(xs.0..=xs.1), rng.random_range(ys.0..=ys.1))
}

/// Paints every masked pixel with one color drawn from `entry`. The mask and
/// unmasked pixels are left as they are.
pub fn recolor_pure_ball(patch: &ObjectPatch, entry: &PaletteEntry, rng: &mut RngStream) -> ObjectPatch {
    let color = [
        rng.random_range(entry.r.0..=entry.r.1),
        rng.random_range(entry.g.0..=entry.g.1),
        rng.random_range(entry.b.0..=entry.b.1),
    ];
    let mut out = patch.clone();
    for (x, y, p) in out.pixels.enumerate_pixels_mut() {
        if patch.mask.get(x, y) {
            *p = Rgb(color);
        }
    }
    out
}

fn draw_count(r: IntRange, rng: &mut RngStream) -> u32 {
    rng.random_range(r.min()..=r.max())
}

/// Picks a bank patch of `category_id` and, for balls, maybe recolors it.
fn pick_patch(
    bank: &ObjectBank,
    category_id: u64,
    recolorable: bool,
    config: &AugmentConfig,
    rng: &mut RngStream,
) -> Result<(usize, ObjectPatch, Option<[u8; 3]>), AugmentError> {
    let candidates = bank.indices_for(category_id);
    if candidates.is_empty() {
        return Err(AugmentError::EmptyBank { category_id });
    }
    let bank_index = candidates[rng.random_range(0..candidates.len())];
    let source = bank.get(bank_index);
    if recolorable && !config.pure_ball_palette.is_empty() && rng.random_bool(config.pure_ball_prob) {
        let entry = &config.pure_ball_palette[rng.random_range(0..config.pure_ball_palette.len())];
        let patch = recolor_pure_ball(source, entry, rng);
        let color = mask_color(&patch);
        return Ok((bank_index, patch, color));
    }
    Ok((bank_index, source.clone(), None))
}

fn mask_color(patch: &ObjectPatch) -> Option<[u8; 3]> {
    let (w, h) = patch.mask.dims();
    (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .find(|&(x, y)| patch.mask.get(x, y))
        .map(|(x, y)| patch.pixels.get_pixel(x, y).0)
}

/// Composites `patch` at `position`: copies masked pixels, subtracts the pasted
/// region from every instance, drops fully covered ones, and appends the new instance.
/// Returns how many instances were removed.
pub fn paste_patch(scene: &mut Scene, patch: &ObjectPatch, position: (i64, i64)) -> Result<usize, MaskError> {
    let (w, h) = scene.image.dimensions();
    let mut masks: Vec<_> = scene.instances.iter_mut().map(|i| std::mem::replace(&mut i.mask, mask::BinaryMask::new(0, 0))).collect();
    let result = mask::composite_paste_in_place(w, h, &mut masks, &patch.mask, position);
    for (inst, m) in scene.instances.iter_mut().zip(masks) {
        inst.mask = m;
    }
    let (pasted, removed) = result?;

    let (px, py) = position;
    for sy in 0..patch.height() {
        for sx in 0..patch.width() {
            let (x, y) = (px + sx as i64, py + sy as i64);
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 || !patch.mask.get(sx, sy) {
                continue;
            }
            scene.image.put_pixel(x as u32, y as u32, *patch.pixels.get_pixel(sx, sy));
        }
    }
    let mut i = 0;
    scene.instances.retain(|_| {
        let keep = !removed.contains(&i);
        i += 1;
        keep
    });
    scene.instances.push(Instance::new(None, patch.category_id, pasted));
    Ok(removed.len())
}

/// Pastes a random number of persons, then balls, at view-constrained anchors.
pub fn paste_objects(
    scene: &mut Scene,
    bank: &ObjectBank,
    categories: TaskCategories,
    view: ViewSide,
    config: &AugmentConfig,
    rng: &mut RngStream,
) -> Result<Vec<PasteRecord>, AugmentError> {
    let n_persons = draw_count(config.persons_per_image, rng);
    let n_balls = draw_count(config.balls_per_image, rng);
    let plan = std::iter::repeat_n(categories.person, n_persons as usize)
        .chain(std::iter::repeat_n(categories.ball, n_balls as usize));

    let (w, h) = scene.image.dimensions();
    let mut log = Vec::new();
    for category_id in plan {
        let is_ball = category_id == categories.ball;
        let (bank_index, patch, recolor) = pick_patch(bank, category_id, is_ball, config, rng)?;
        let mut attempts = 0;
        loop {
            attempts += 1;
            let position = sample_view_paste_location(
                view,
                w,
                h,
                (patch.width(), patch.height()),
                config.max_resample_attempts,
                rng,
            )?;
            match paste_patch(scene, &patch, position) {
                Ok(removed) => {
                    log.push(PasteRecord {
                        stage: PasteStage::View,
                        category_id,
                        bank_index,
                        source_annotation_id: patch.source_annotation_id,
                        position,
                        recolor,
                        anchor_box: None,
                        removed_annotations: removed,
                    });
                    break;
                }
                Err(MaskError::EmptyAfterClip) if attempts < config.max_resample_attempts => continue,
                Err(MaskError::EmptyAfterClip) => return Err(AugmentError::SamplingExhausted { attempts }),
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(log)
}

/// Pastes one ball near each of a few randomly chosen persons.
///
/// An anchor whose clipped ball would be invisible is redrawn; after
/// `max_resample_attempts` misses that person is skipped.
pub fn paste_interaction_balls(
    scene: &mut Scene,
    bank: &ObjectBank,
    categories: TaskCategories,
    config: &AugmentConfig,
    rng: &mut RngStream,
) -> Result<Vec<PasteRecord>, AugmentError> {
    let persons: Vec<Box> = scene
        .instances
        .iter()
        .filter(|i| i.category_id == categories.person)
        .filter_map(|i| mask::mask_bbox(&i.mask))
        .collect();
    if persons.is_empty() {
        return Ok(Vec::new());
    }
    let k = (draw_count(config.interaction_persons, rng) as usize).min(persons.len());
    if k == 0 {
        return Ok(Vec::new());
    }
    let chosen = index::sample(rng, persons.len(), k).into_vec();

    let mut log = Vec::new();
    for person in chosen.into_iter().map(|i| persons[i]) {
        let (bank_index, patch, recolor) = pick_patch(bank, categories.ball, true, config, rng)?;
        for _ in 0..config.max_resample_attempts {
            let position = sample_interaction_location(&person, rng);
            match paste_patch(scene, &patch, position) {
                Ok(removed) => {
                    log.push(PasteRecord {
                        stage: PasteStage::Interaction,
                        category_id: categories.ball,
                        bank_index,
                        source_annotation_id: patch.source_annotation_id,
                        position,
                        recolor,
                        anchor_box: Some(person),
                        removed_annotations: removed,
                    });
                    break;
                }
                Err(MaskError::EmptyAfterClip) => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::BinaryMask;
    use image::RgbImage;

    fn ball_patch() -> ObjectPatch {
        let mask = BinaryMask::from_fn(12, 12, |x, y| {
            let (dx, dy) = (x as f64 + 0.5 - 6.0, y as f64 + 0.5 - 6.0);
            dx * dx + dy * dy <= 36.0
        });
        ObjectPatch {
            category_id: 2,
            pixels: RgbImage::from_fn(12, 12, |x, y| Rgb([200, (x * 20) as u8, (y * 20) as u8])),
            mask,
            source_image_id: 1,
            source_annotation_id: 9,
        }
    }

    #[test]
    fn view_bounds_substitution() {
        assert_eq!(view_bounds(ViewSide::Right, 1920, 1440), ((384.0, 1920.0), (432.0, 1008.0)));
        assert_eq!(view_bounds(ViewSide::Left, 1920, 1440).0, (0.0, 1536.0));
    }

    #[test]
    fn view_samples_stay_in_bounds() {
        let mut rng = RngStream::from_u64(11);
        for view in [ViewSide::Left, ViewSide::Right] {
            for _ in 0..2000 {
                let (x, y) = sample_view_paste_location(view, 1920, 1440, (30, 30), 25, &mut rng).unwrap();
                match view {
                    ViewSide::Right => assert!((384..=1919).contains(&x)),
                    ViewSide::Left => assert!((0..=1536).contains(&x)),
                }
                assert!((432..=1008).contains(&y));
            }
        }
    }

    #[test]
    fn tiny_frame_exhausts() {
        let mut rng = RngStream::from_u64(1);
        assert!(matches!(
            sample_view_paste_location(ViewSide::Right, 1, 1, (1, 1), 5, &mut rng),
            Err(AugmentError::SamplingExhausted { .. })
        ));
    }

    #[test]
    fn interaction_samples_in_box() {
        let mut rng = RngStream::from_u64(5);
        let b = Box::new(100.0, 200.0, 150.0, 400.0);
        for _ in 0..2000 {
            let (x, y) = sample_interaction_location(&b, &mut rng);
            assert!((100..=150).contains(&x) && (200..=400).contains(&y));
        }
        let thin = Box::new(70.0, 10.0, 70.0, 20.0);
        for _ in 0..100 {
            assert_eq!(sample_interaction_location(&thin, &mut rng).0, 70);
        }
    }

    #[test]
    fn recolor_brown_is_flat_and_keeps_mask() {
        let patch = ball_patch();
        let out = recolor_pure_ball(&patch, &PaletteEntry::brown(), &mut RngStream::from_u64(2));
        assert_eq!(out.mask, patch.mask);
        let mut colors = std::collections::HashSet::new();
        for (x, y, p) in out.pixels.enumerate_pixels() {
            if patch.mask.get(x, y) {
                assert!((80..=90).contains(&p.0[0]) && (50..=60).contains(&p.0[1]) && (50..=60).contains(&p.0[2]));
                colors.insert(p.0);
            } else {
                assert_eq!(p, patch.pixels.get_pixel(x, y));
            }
        }
        assert_eq!(colors.len(), 1);
        assert_eq!(out.pixels.get_pixel(0, 0), patch.pixels.get_pixel(0, 0));
    }

    #[test]
    fn paste_patch_writes_pixels_and_occludes() {
        let full = BinaryMask::from_fn(40, 40, |x, y| (10..14).contains(&x) && (10..14).contains(&y));
        let mut scene = Scene {
            image_id: 1,
            file_name: "x.png".into(),
            image: RgbImage::new(40, 40),
            instances: vec![Instance::new(Some(3), 1, full)],
        };
        let patch = ball_patch();
        let removed = paste_patch(&mut scene, &patch, (6, 6)).unwrap();
        assert_eq!(removed, 1);
        assert_eq!(scene.instances.len(), 1);
        assert_eq!(scene.instances[0].category_id, 2);
        assert_eq!(scene.image.get_pixel(12, 12), patch.pixels.get_pixel(6, 6));
        assert_eq!(scene.image.get_pixel(6, 6).0, [0, 0, 0]);
    }
}
