//! The augmentation pipeline: view-specific copy-paste, person-anchored ball
//! paste, then one geometric and all four photometric distortions.
//!
//! Each stage draws from its own [`RngStream`] keyed by `(seed, image_id, stage)`,
//! so a dataset can be processed in any order or in parallel with identical results.

pub mod config;
pub mod paste;
pub mod photometric;
pub mod rng;
pub mod transform;

use std::path::Path;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::ObjectBank;
use crate::coco::{self, AnnotationRecord, CocoError, DatasetDoc, Extra, ImageRecord};
use crate::mask::{BinaryMask, MaskError};

pub use config::AugmentConfig;
pub use paste::{PasteRecord, PasteStage};
pub use photometric::PhotometricParams;
pub use rng::RngStream;
pub use transform::{GeometricOp, ResizePlan};

pub const STAGE_VIEW_PASTE: &str = "view_paste";
pub const STAGE_INTERACTION: &str = "interaction_paste";
pub const STAGE_GEOMETRIC: &str = "geometric";
pub const STAGE_PHOTOMETRIC: &str = "photometric";
pub const STAGE_RESIZE: &str = "resize";

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("object bank has no patches for category {category_id}")]
    EmptyBank { category_id: u64 },
    #[error("no visible paste location after {attempts} attempts")]
    SamplingExhausted { attempts: u32 },
    #[error("dataset has no category named {0:?}")]
    MissingCategory(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Coco(#[from] CocoError),
    #[error("image {image_id}: {reason}")]
    Image { image_id: u64, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewSide {
    Left,
    Right,
}

/// Classifies the camera from the file name: strip directories and the
/// extension, take the part before the first `_`; a trailing `0` means right.
pub fn infer_view(file_name: &str) -> ViewSide {
    let stem = Path::new(file_name)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(file_name);
    let token = stem.split('_').next().unwrap_or(stem);
    if token.ends_with('0') {
        ViewSide::Right
    } else {
        ViewSide::Left
    }
}

/// Category ids for the two task classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskCategories {
    pub person: u64,
    pub ball: u64,
}

impl TaskCategories {
    pub fn resolve(doc: &DatasetDoc, config: &AugmentConfig) -> Result<Self, AugmentError> {
        let find = |name: &str| {
            doc.category_by_name(name)
                .map(|c| c.id)
                .ok_or_else(|| AugmentError::MissingCategory(name.to_string()))
        };
        Ok(Self {
            person: find(&config.person_category)?,
            ball: find(&config.ball_category)?,
        })
    }
}

/// One object in a scene, with a full-frame dense mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    /// `None` for objects pasted during augmentation; assigned on export.
    pub annotation_id: Option<u64>,
    pub category_id: u64,
    pub iscrowd: bool,
    pub mask: BinaryMask,
    pub extra: Extra,
}

impl Instance {
    pub fn new(annotation_id: Option<u64>, category_id: u64, mask: BinaryMask) -> Self {
        Self {
            annotation_id,
            category_id,
            iscrowd: false,
            mask,
            extra: Extra::new(),
        }
    }
}

/// An image and its annotations in working form.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_id: u64,
    pub file_name: String,
    pub image: RgbImage,
    pub instances: Vec<Instance>,
}

impl Scene {
    pub fn from_records(record: &ImageRecord, image: RgbImage, annotations: &[&AnnotationRecord]) -> Result<Self, AugmentError> {
        if image.dimensions() != (record.width, record.height) {
            return Err(AugmentError::Image {
                image_id: record.id,
                reason: format!("is {:?}, declared {}x{}", image.dimensions(), record.width, record.height),
            });
        }
        let mut instances = Vec::with_capacity(annotations.len());
        for a in annotations {
            let mask = a.segmentation.to_mask(record.width, record.height)?;
            if mask.is_empty() {
                continue;
            }
            instances.push(Instance {
                annotation_id: Some(a.id),
                category_id: a.category_id,
                iscrowd: a.iscrowd,
                mask,
                extra: a.extra.clone(),
            });
        }
        Ok(Self {
            image_id: record.id,
            file_name: record.file_name.clone(),
            image,
            instances,
        })
    }

    /// RLE annotation records with bbox and area recomputed from the masks.
    /// Instances without an id take fresh ids from `next_id`.
    pub fn to_annotations(&self, next_id: &mut u64) -> Vec<AnnotationRecord> {
        self.instances
            .iter()
            .filter(|inst| !inst.mask.is_empty())
            .filter_map(|inst| {
                let id = inst.annotation_id.unwrap_or_else(|| {
                    let id = *next_id;
                    *next_id += 1;
                    id
                });
                let mut rec = AnnotationRecord::from_mask(id, self.image_id, inst.category_id, &inst.mask)?;
                rec.iscrowd = inst.iscrowd;
                rec.extra = inst.extra.clone();
                Some(rec)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentLog {
    pub image_id: u64,
    pub view: ViewSide,
    pub pastes: Vec<PasteRecord>,
    pub geometric: GeometricOp,
    pub photometric: PhotometricParams,
}

/// Runs the full pipeline on one scene:
/// view paste → interaction paste → geometric → photometric.
pub fn augment_image(
    scene: &mut Scene,
    bank: &ObjectBank,
    categories: TaskCategories,
    config: &AugmentConfig,
) -> Result<AugmentLog, AugmentError> {
    let image_id = scene.image_id;
    let stream = |stage| RngStream::derive(config.seed, image_id, stage);
    let view = infer_view(&scene.file_name);

    let mut rng = stream(STAGE_VIEW_PASTE);
    let mut pastes = paste::paste_objects(scene, bank, categories, view, config, &mut rng)?;
    let mut rng = stream(STAGE_INTERACTION);
    pastes.extend(paste::paste_interaction_balls(scene, bank, categories, config, &mut rng)?);

    let mut rng = stream(STAGE_GEOMETRIC);
    let geometric = transform::apply_geometric(scene, config, &mut rng);
    let mut rng = stream(STAGE_PHOTOMETRIC);
    let photometric = photometric::apply_photometric(&mut scene.image, &config.photometric, &mut rng);

    Ok(AugmentLog {
        image_id: scene.image_id,
        view,
        pastes,
        geometric,
        photometric,
    })
}

/// `factor` copies of every image and annotation; copy `k` has its ids shifted
/// by `k·(max id + 1)`. File names are kept, so copies share source pixels.
pub fn duplicate_dataset(doc: &DatasetDoc, factor: u32) -> Result<DatasetDoc, CocoError> {
    assert!(factor >= 1, "duplication factor must be at least 1");
    let image_span = doc.images.iter().map(|i| i.id).max().map_or(Some(0), |m| m.checked_add(1));
    let ann_span = doc.annotations.iter().map(|a| a.id).max().map_or(Some(0), |m| m.checked_add(1));
    let (Some(image_span), Some(ann_span)) = (image_span, ann_span) else {
        return Err(CocoError::IdOverflow { id: u64::MAX, offset: 1 });
    };
    let mut out = DatasetDoc {
        images: Vec::with_capacity(doc.images.len() * factor as usize),
        annotations: Vec::with_capacity(doc.annotations.len() * factor as usize),
        categories: doc.categories.clone(),
        extra: doc.extra.clone(),
    };
    for k in 0..factor as u64 {
        let offset = |span: u64| span.checked_mul(k).ok_or(CocoError::IdOverflow { id: span, offset: k });
        let copy = coco::reindex(doc, offset(image_span)?, offset(ann_span)?)?;
        out.images.extend(copy.images);
        out.annotations.extend(copy.annotations);
    }
    Ok(out)
}

/// Output file name for an augmented image: the source stem (so the view
/// token survives) plus the new image id.
pub fn augmented_file_name(source: &str, image_id: u64) -> String {
    let stem = Path::new(source)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(source);
    format!("{stem}_aug{image_id:06}.png")
}

#[derive(Debug, Clone)]
pub struct AugmentedDataset {
    pub doc: DatasetDoc,
    pub logs: Vec<AugmentLog>,
}

/// Augments every image of `doc` in parallel on the current rayon pool.
///
/// `load` fetches source pixels; `store` receives each augmented image with its
/// output record as soon as it is ready. Records, annotations and logs come back
/// in document order whatever the scheduling. Surviving annotations keep their
/// ids; pasted ones are numbered after the largest input id, image by image.
pub fn augment_dataset<L, S>(
    doc: &DatasetDoc,
    bank: &ObjectBank,
    config: &AugmentConfig,
    load: L,
    store: S,
) -> Result<AugmentedDataset, AugmentError>
where
    L: Fn(&ImageRecord) -> Result<RgbImage, AugmentError> + Sync,
    S: Fn(&ImageRecord, &RgbImage) -> Result<(), AugmentError> + Sync,
{
    let categories = TaskCategories::resolve(doc, config)?;
    let by_image = doc.annotations_by_image();
    let none = Vec::new();

    let results: Vec<(ImageRecord, Scene, AugmentLog)> = doc
        .images
        .par_iter()
        .map(|record| {
            let pixels = load(record)?;
            let anns = by_image.get(&record.id).unwrap_or(&none);
            let mut scene = Scene::from_records(record, pixels, anns)?;
            let log = augment_image(&mut scene, bank, categories, config)?;
            let out_record = ImageRecord {
                file_name: augmented_file_name(&record.file_name, record.id),
                ..record.clone()
            };
            store(&out_record, &scene.image)?;
            // Pixels are no longer needed; keep only masks for export.
            scene.image = RgbImage::new(0, 0);
            Ok((out_record, scene, log))
        })
        .collect::<Result<_, AugmentError>>()?;

    let mut next_id = doc.annotations.iter().map(|a| a.id).max().map_or(1, |m| m + 1);
    let mut out = DatasetDoc {
        categories: doc.categories.clone(),
        extra: doc.extra.clone(),
        ..Default::default()
    };
    let mut logs = Vec::with_capacity(results.len());
    for (record, scene, log) in results {
        out.annotations.extend(scene.to_annotations(&mut next_id));
        out.images.push(record);
        logs.push(log);
    }
    Ok(AugmentedDataset { doc: out, logs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coco::CategoryRecord;

    #[test]
    fn view_from_file_name() {
        assert_eq!(infer_view("1640_03_02.png"), ViewSide::Right);
        assert_eq!(infer_view("1641_03_02.png"), ViewSide::Left);
        assert_eq!(infer_view("a.png"), ViewSide::Left);
        assert_eq!(infer_view("dir/20.jpg"), ViewSide::Right);
        assert_eq!(infer_view("100_x_aug000003.png"), ViewSide::Right);
    }

    fn doc_with(n_images: u64, anns_per_image: u64) -> DatasetDoc {
        let m = BinaryMask::from_fn(10, 10, |x, y| x < 3 && y < 4);
        let mut doc = DatasetDoc {
            categories: vec![CategoryRecord { id: 1, name: "human".into(), extra: Extra::new() }],
            ..Default::default()
        };
        let mut aid = 1;
        for i in 1..=n_images {
            doc.images.push(ImageRecord { id: i, file_name: format!("{i}_x.png"), width: 10, height: 10, extra: Extra::new() });
            for _ in 0..anns_per_image {
                doc.annotations.push(AnnotationRecord::from_mask(aid, i, 1, &m).unwrap());
                aid += 1;
            }
        }
        doc
    }

    #[test]
    fn duplicate_identity_and_cardinality() {
        let doc = doc_with(4, 2);
        assert_eq!(duplicate_dataset(&doc, 1).unwrap(), doc);
        let dup = duplicate_dataset(&doc, 3).unwrap();
        assert_eq!(dup.images.len(), 12);
        assert_eq!(dup.annotations.len(), 24);
        assert!(coco::validate_dataset(&dup).is_empty());
        let names: std::collections::HashSet<_> = dup.images.iter().map(|i| i.file_name.as_str()).collect();
        assert_eq!(names.len(), 4);
    }

    #[test]
    fn duplicate_overflow() {
        let mut doc = doc_with(1, 0);
        doc.images[0].id = u64::MAX / 2;
        assert!(matches!(duplicate_dataset(&doc, 4), Err(CocoError::IdOverflow { .. })));
    }

    #[test]
    fn export_assigns_fresh_ids() {
        let m = BinaryMask::from_fn(10, 10, |x, _| x == 2);
        let scene = Scene {
            image_id: 4,
            file_name: "x.png".into(),
            image: RgbImage::new(10, 10),
            instances: vec![Instance::new(None, 1, m.clone()), Instance::new(Some(2), 1, m), Instance::new(None, 1, BinaryMask::new(10, 10))],
        };
        let mut next = 50;
        let anns = scene.to_annotations(&mut next);
        assert_eq!(anns.iter().map(|a| a.id).collect::<Vec<_>>(), vec![50, 2]);
        assert_eq!(anns[0].bbox, [2.0, 0.0, 1.0, 10.0]);
        assert_eq!(anns[0].area, 10.0);
        assert_eq!(next, 51);
    }
}
