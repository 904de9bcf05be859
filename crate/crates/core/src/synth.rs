//! Synthetic court scenes with exact masks: striped floor, a dark stand band
//! across the top fifth, a court line whose side depends on the camera, and
//! simple person and ball shapes.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{RngStream, ViewSide};
use crate::coco::{AnnotationRecord, CategoryRecord, DatasetDoc, Extra, ImageRecord};
use crate::mask::{rasterize_ellipse, BinaryMask};

pub const PERSON_CATEGORY: u64 = 1;
pub const BALL_CATEGORY: u64 = 2;
pub const BALL_RADIUS: (f64, f64) = (10.0, 18.0);
const STAGE_SYNTH: &str = "synth";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("cannot write {path}: {reason}")]
    IoFailure { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub n_persons: u32,
    pub n_balls: u32,
    pub view: ViewSide,
    pub seed: u64,
    /// Chance that a person overlaps the previous one, and that a ball is held.
    pub occlusion_prob: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 1920,
            height: 1440,
            n_persons: 3,
            n_balls: 1,
            view: ViewSide::Right,
            seed: 0,
            occlusion_prob: 0.3,
        }
    }
}

pub fn categories() -> Vec<CategoryRecord> {
    vec![
        CategoryRecord { id: PERSON_CATEGORY, name: "human".into(), extra: Extra::new() },
        CategoryRecord { id: BALL_CATEGORY, name: "ball".into(), extra: Extra::new() },
    ]
}

/// `cam0_…` for the right camera and `cam1_…` for the left.
pub fn scene_file_name(view: ViewSide, image_id: u64) -> String {
    let cam = match view {
        ViewSide::Right => 0,
        ViewSide::Left => 1,
    };
    format!("cam{cam}_{image_id:06}.png")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallShape {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub image: RgbImage,
    pub record: ImageRecord,
    /// Ids are 1-based within the scene.
    pub annotations: Vec<AnnotationRecord>,
    pub balls: Vec<BallShape>,
}

const JERSEYS: [[u8; 3]; 4] = [[200, 30, 40], [30, 60, 180], [240, 240, 240], [20, 120, 60]];
const SKIN: [u8; 3] = [190, 140, 110];

fn background(w: u32, h: u32, view: ViewSide, rng: &mut RngStream) -> RgbImage {
    let stand = h / 5;
    let base: [u8; 3] = [rng.random_range(170..190), rng.random_range(120..140), rng.random_range(80..95)];
    let mut img = RgbImage::from_fn(w, h, |_, y| {
        if y < stand {
            let v = if (y / 6) % 2 == 0 { 40 } else { 55 };
            Rgb([v, v, v + 15])
        } else {
            let shade = if (y / 24) % 2 == 0 { 0 } else { 8 };
            Rgb(base.map(|c| c.saturating_sub(shade)))
        }
    });
    let line_x = match view {
        ViewSide::Right => w * 3 / 10,
        ViewSide::Left => w - w * 3 / 10,
    };
    for y in stand..h {
        for x in line_x.saturating_sub(2)..(line_x + 2).min(w) {
            img.put_pixel(x, y, Rgb([235, 235, 235]));
        }
    }
    img
}

fn person_mask(w: u32, h: u32, cx: f64, cy: f64, tw: f64, th: f64) -> (BinaryMask, BinaryMask) {
    let (x0, x1) = (cx - tw / 2.0, cx + tw / 2.0);
    let (y0, y1) = (cy - th / 2.0, cy + th / 2.0);
    let torso = BinaryMask::from_fn(w, h, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        px >= x0 && px < x1 && py >= y0 && py < y1
    });
    let r = tw * 0.35;
    let head = rasterize_ellipse(cx, y0 - r * 0.9, r, r * 1.1, w, h);
    (torso, head)
}

fn paint(img: &mut RgbImage, mask: &BinaryMask, color: [u8; 3]) {
    for y in 0..mask.height() {
        for (x, &v) in mask.row(y).iter().enumerate() {
            if v != 0 {
                img.put_pixel(x as u32, y, Rgb(color));
            }
        }
    }
}

/// Renders one scene. Objects are drawn in order, so earlier masks lose the
/// pixels later objects cover; fully hidden objects get no annotation.
pub fn generate_scene(spec: &SceneSpec, image_id: u64) -> SyntheticScene {
    let (w, h) = (spec.width, spec.height);
    let mut rng = RngStream::derive(spec.seed, image_id, STAGE_SYNTH);
    let mut image = background(w, h, spec.view, &mut rng);
    let (wf, hf) = (w as f64, h as f64);
    let band = (hf / 2.0 - hf / 5.0, hf / 2.0 + hf / 5.0);

    let mut objects: Vec<(u64, BinaryMask)> = Vec::new();
    let covered = |objects: &mut Vec<(u64, BinaryMask)>, top: &BinaryMask| {
        for (_, m) in objects.iter_mut() {
            m.subtract(top).expect("same frame");
        }
    };

    let mut last_person: Option<(f64, f64, f64, f64)> = None;
    for _ in 0..spec.n_persons {
        let tw = rng.random_range(wf / 32.0..=wf / 16.0).max(2.0);
        let th = rng.random_range(hf * 0.10..=hf * 0.18).max(2.0);
        let cx = match last_person {
            Some((px, _, pw, _)) if rng.random_bool(spec.occlusion_prob) => {
                (px + rng.random_range(-pw..=pw) * 0.6).clamp(0.0, wf)
            }
            _ => rng.random_range(tw / 2.0..=(wf - tw / 2.0).max(tw / 2.0)),
        };
        let cy = rng.random_range(band.0..=band.1);
        let (torso, head) = person_mask(w, h, cx, cy, tw, th);
        let jersey = JERSEYS[rng.random_range(0..JERSEYS.len())];
        paint(&mut image, &torso, jersey);
        paint(&mut image, &head, SKIN);
        let mut body = torso;
        body.union_with(&head).expect("same frame");
        covered(&mut objects, &body);
        objects.push((PERSON_CATEGORY, body));
        last_person = Some((cx, cy, tw, th));
    }

    let mut balls = Vec::new();
    for _ in 0..spec.n_balls {
        let radius = rng.random_range(BALL_RADIUS.0..=BALL_RADIUS.1);
        let (cx, cy) = match last_person {
            Some((px, py, pw, _)) if rng.random_bool(spec.occlusion_prob) => {
                let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                (px + side * pw / 2.0, py)
            }
            _ => {
                let ylo = (hf / 5.0 + radius).min(hf);
                (
                    rng.random_range(radius.min(wf)..=(wf - radius).max(radius.min(wf))),
                    rng.random_range(ylo..=(hf - radius).max(ylo)),
                )
            }
        };
        let mask = rasterize_ellipse(cx, cy, radius, radius, w, h);
        let color = [rng.random_range(200..=230), rng.random_range(90..=120), rng.random_range(20..=40)];
        paint(&mut image, &mask, color);
        covered(&mut objects, &mask);
        objects.push((BALL_CATEGORY, mask));
        balls.push(BallShape { cx, cy, radius });
    }

    let annotations = objects
        .iter()
        .filter_map(|(cat, m)| AnnotationRecord::from_mask(0, image_id, *cat, m))
        .enumerate()
        .map(|(i, mut a)| {
            a.id = i as u64 + 1;
            a
        })
        .collect();
    SyntheticScene {
        image,
        record: ImageRecord {
            id: image_id,
            file_name: scene_file_name(spec.view, image_id),
            width: w,
            height: h,
            extra: Extra::new(),
        },
        annotations,
        balls,
    }
}

/// Scene `index` of a corpus: image id `index + 1`, views alternating and
/// starting with `base.view`.
pub fn corpus_scene(base: &SceneSpec, index: u32) -> SyntheticScene {
    let view = match (base.view, index % 2) {
        (v, 0) => v,
        (ViewSide::Right, _) => ViewSide::Left,
        (ViewSide::Left, _) => ViewSide::Right,
    };
    generate_scene(&SceneSpec { view, ..*base }, index as u64 + 1)
}

fn assemble(parts: Vec<(ImageRecord, Vec<AnnotationRecord>)>) -> DatasetDoc {
    let mut doc = DatasetDoc { categories: categories(), ..Default::default() };
    let mut next = 1;
    for (record, anns) in parts {
        doc.images.push(record);
        for mut a in anns {
            a.id = next;
            next += 1;
            doc.annotations.push(a);
        }
    }
    doc
}

/// The document [`generate_corpus`] would write, without touching the disk.
/// Pixels can be recreated with [`corpus_scene`].
pub fn corpus_doc(n_images: u32, base: &SceneSpec) -> DatasetDoc {
    let parts = (0..n_images)
        .into_par_iter()
        .map(|i| {
            let scene = corpus_scene(base, i);
            (scene.record, scene.annotations)
        })
        .collect();
    assemble(parts)
}

/// Writes `n_images` scenes to `out_dir/images/` and returns the combined
/// document. Annotation ids run from 1 in image order.
pub fn generate_corpus(n_images: u32, base: &SceneSpec, out_dir: &Path) -> Result<DatasetDoc, SynthError> {
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| SynthError::IoFailure { path: images_dir.clone(), reason: e.to_string() })?;
    let parts: Vec<(ImageRecord, Vec<AnnotationRecord>)> = (0..n_images)
        .into_par_iter()
        .map(|i| {
            let scene = corpus_scene(base, i);
            let path = images_dir.join(&scene.record.file_name);
            scene
                .image
                .save_with_format(&path, image::ImageFormat::Png)
                .map_err(|e| SynthError::IoFailure { path, reason: e.to_string() })?;
            Ok((scene.record, scene.annotations))
        })
        .collect::<Result<_, SynthError>>()?;
    Ok(assemble(parts))
}
