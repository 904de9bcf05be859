//! COCO-style instance segmentation documents.
//!
//! Segmentations are accepted as polygons or uncompressed RLE. Everything the
//! pipeline writes uses RLE. Unknown keys on the document and on each record
//! are kept in `extra` and written back out, so foreign files survive a round
//! trip. Keys are emitted in a fixed order (struct fields, then sorted extras).

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::mask::{self, BinaryMask, MaskError, Polygon, Rle};

pub type Extra = BTreeMap<String, Value>;

/// Tolerance for bbox comparisons.
pub const BBOX_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CocoError {
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("annotation {annotation_id} references missing {kind} {target_id}")]
    BrokenReference {
        annotation_id: u64,
        kind: &'static str,
        target_id: u64,
    },
    #[error("annotation {annotation_id}: {reason}")]
    GeometryError { annotation_id: u64, reason: String },
    #[error("id {id} shifted by {offset} overflows")]
    IdOverflow { id: u64, offset: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    #[serde(flatten)]
    pub extra: Extra,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub id: u64,
    pub name: String,
    #[serde(flatten)]
    pub extra: Extra,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    Rle(Rle),
    Polygons(Vec<Vec<f64>>),
}

impl Segmentation {
    /// Decodes to a dense mask on a `width × height` frame.
    pub fn to_mask(&self, width: u32, height: u32) -> Result<BinaryMask, MaskError> {
        match self {
            Segmentation::Rle(rle) => {
                if (rle.width(), rle.height()) != (width, height) {
                    return Err(MaskError::DimensionMismatch {
                        a: (rle.width(), rle.height()),
                        b: (width, height),
                    });
                }
                mask::rle_decode(rle)
            }
            Segmentation::Polygons(flat) => {
                let polys: Vec<Polygon> = flat.iter().map(|p| mask::polygon_from_flat(p)).collect();
                mask::rasterize_polygons(&polys, width, height)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, width, height]`, top-left origin.
    pub bbox: [f64; 4],
    pub segmentation: Segmentation,
    pub area: f64,
    #[serde(default, with = "crowd_flag")]
    pub iscrowd: bool,
    #[serde(flatten)]
    pub extra: Extra,
}

impl AnnotationRecord {
    /// Builds an RLE-backed record with bbox and area derived from `mask`.
    /// Returns `None` for an empty mask.
    pub fn from_mask(id: u64, image_id: u64, category_id: u64, mask: &BinaryMask) -> Option<Self> {
        let bbox = mask::mask_bbox(mask)?;
        Some(Self {
            id,
            image_id,
            category_id,
            bbox: bbox.to_xywh(),
            segmentation: Segmentation::Rle(mask::rle_encode(mask)),
            area: mask.area() as f64,
            iscrowd: false,
            extra: Extra::new(),
        })
    }
}

// COCO writes iscrowd as 0/1.
mod crowd_flag {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(*v as u8)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        #[derive(serde::Deserialize)]
        #[serde(untagged)]
        enum Flag {
            Int(u64),
            Bool(bool),
        }
        Ok(match Flag::deserialize(d)? {
            Flag::Int(v) => v != 0,
            Flag::Bool(b) => b,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetDoc {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
    pub categories: Vec<CategoryRecord>,
    #[serde(flatten)]
    pub extra: Extra,
}

impl DatasetDoc {
    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn category_by_name(&self, name: &str) -> Option<&CategoryRecord> {
        self.categories.iter().find(|c| c.name == name)
    }

    /// Annotations grouped by image id, each group in document order.
    pub fn annotations_by_image(&self) -> HashMap<u64, Vec<&AnnotationRecord>> {
        let mut map: HashMap<u64, Vec<&AnnotationRecord>> = HashMap::new();
        for a in &self.annotations {
            map.entry(a.image_id).or_default().push(a);
        }
        map
    }
}

pub fn parse_dataset(raw: &[u8]) -> Result<DatasetDoc, CocoError> {
    let value: Value =
        serde_json::from_slice(raw).map_err(|e| CocoError::MalformedDocument(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| CocoError::MalformedDocument("top level is not an object".into()))?;
    for key in ["images", "annotations", "categories"] {
        if !obj.get(key).is_some_and(Value::is_array) {
            return Err(CocoError::MalformedDocument(format!("missing array \"{key}\"")));
        }
    }
    let doc: DatasetDoc =
        serde_json::from_value(value).map_err(|e| CocoError::MalformedDocument(e.to_string()))?;

    let image_ids: HashSet<u64> = doc.images.iter().map(|i| i.id).collect();
    let category_ids: HashSet<u64> = doc.categories.iter().map(|c| c.id).collect();
    for a in &doc.annotations {
        if !image_ids.contains(&a.image_id) {
            return Err(CocoError::BrokenReference {
                annotation_id: a.id,
                kind: "image",
                target_id: a.image_id,
            });
        }
        if !category_ids.contains(&a.category_id) {
            return Err(CocoError::BrokenReference {
                annotation_id: a.id,
                kind: "category",
                target_id: a.category_id,
            });
        }
        if a.bbox[2] < 0.0 || a.bbox[3] < 0.0 || a.bbox.iter().any(|v| !v.is_finite()) {
            return Err(CocoError::GeometryError {
                annotation_id: a.id,
                reason: format!("invalid bbox {:?}", a.bbox),
            });
        }
    }
    Ok(doc)
}

pub fn serialize_dataset(doc: &DatasetDoc) -> Vec<u8> {
    serde_json::to_vec(doc).expect("dataset documents always serialize")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Image,
    Category,
    Annotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    EmptyImageSize,
    DuplicateId,
    MissingImage,
    MissingCategory,
    BboxOutOfImage,
    BboxNegativeSize,
    NonPositiveArea,
    UndecodableMask,
    AreaMismatch,
    BboxMaskMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub kind: RecordKind,
    pub id: u64,
    pub rule: Rule,
    pub detail: String,
}

/// Checks every document invariant. An empty report means the document is valid.
///
/// The bbox/mask agreement rule is applied to RLE segmentations only; polygon
/// bboxes conventionally carry the polygon's continuous extent.
pub fn validate_dataset(doc: &DatasetDoc) -> Vec<Violation> {
    let mut report = Vec::new();
    let mut push = |kind, id, rule, detail: String| report.push(Violation { kind, id, rule, detail });

    let mut images: HashMap<u64, &ImageRecord> = HashMap::new();
    for img in &doc.images {
        if img.width == 0 || img.height == 0 {
            push(RecordKind::Image, img.id, Rule::EmptyImageSize, format!("{}x{}", img.width, img.height));
        }
        if images.insert(img.id, img).is_some() {
            push(RecordKind::Image, img.id, Rule::DuplicateId, String::new());
        }
    }
    let mut categories = HashSet::new();
    for c in &doc.categories {
        if !categories.insert(c.id) {
            push(RecordKind::Category, c.id, Rule::DuplicateId, String::new());
        }
    }
    let mut ann_ids = HashSet::new();
    for a in &doc.annotations {
        let kind = RecordKind::Annotation;
        if !ann_ids.insert(a.id) {
            push(kind, a.id, Rule::DuplicateId, String::new());
        }
        if !categories.contains(&a.category_id) {
            push(kind, a.id, Rule::MissingCategory, format!("category {}", a.category_id));
        }
        let Some(img) = images.get(&a.image_id) else {
            push(kind, a.id, Rule::MissingImage, format!("image {}", a.image_id));
            continue;
        };
        let [x, y, w, h] = a.bbox;
        if w < 0.0 || h < 0.0 {
            push(kind, a.id, Rule::BboxNegativeSize, format!("{:?}", a.bbox));
        } else if x < -BBOX_TOL
            || y < -BBOX_TOL
            || x + w > img.width as f64 + BBOX_TOL
            || y + h > img.height as f64 + BBOX_TOL
        {
            push(
                kind,
                a.id,
                Rule::BboxOutOfImage,
                format!("{:?} outside {}x{}", a.bbox, img.width, img.height),
            );
        }
        if a.area <= 0.0 {
            push(kind, a.id, Rule::NonPositiveArea, format!("{}", a.area));
        }
        let mask = match a.segmentation.to_mask(img.width, img.height) {
            Ok(m) => m,
            Err(e) => {
                push(kind, a.id, Rule::UndecodableMask, e.to_string());
                continue;
            }
        };
        let mask_area = mask.area() as f64;
        if a.area != mask_area {
            push(kind, a.id, Rule::AreaMismatch, format!("stored {} vs mask {}", a.area, mask_area));
        }
        if matches!(a.segmentation, Segmentation::Rle(_)) {
            let ok = match mask::mask_bbox(&mask) {
                Some(b) => b
                    .to_xywh()
                    .iter()
                    .zip(&a.bbox)
                    .all(|(p, q)| (p - q).abs() <= BBOX_TOL),
                None => false,
            };
            if !ok {
                push(kind, a.id, Rule::BboxMaskMismatch, format!("stored {:?}", a.bbox));
            }
        }
    }
    report
}

/// Shifts every image id by `image_id_offset` and every annotation id by
/// `annotation_id_offset`, repointing annotations at their images.
pub fn reindex(doc: &DatasetDoc, image_id_offset: u64, annotation_id_offset: u64) -> Result<DatasetDoc, CocoError> {
    let shift = |id: u64, offset: u64| id.checked_add(offset).ok_or(CocoError::IdOverflow { id, offset });
    let mut out = doc.clone();
    for img in &mut out.images {
        img.id = shift(img.id, image_id_offset)?;
    }
    for a in &mut out.annotations {
        a.id = shift(a.id, annotation_id_offset)?;
        a.image_id = shift(a.image_id, image_id_offset)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_doc() -> DatasetDoc {
        let m = BinaryMask::from_fn(8, 6, |x, y| (2..5).contains(&x) && (1..4).contains(&y));
        DatasetDoc {
            images: vec![
                ImageRecord { id: 1, file_name: "a.png".into(), width: 8, height: 6, extra: Extra::new() },
                ImageRecord { id: 2, file_name: "b.png".into(), width: 8, height: 6, extra: Extra::new() },
            ],
            annotations: vec![
                AnnotationRecord::from_mask(10, 1, 1, &m).unwrap(),
                AnnotationRecord::from_mask(11, 2, 2, &m).unwrap(),
            ],
            categories: vec![
                CategoryRecord { id: 1, name: "human".into(), extra: Extra::new() },
                CategoryRecord { id: 2, name: "ball".into(), extra: Extra::new() },
            ],
            extra: Extra::new(),
        }
    }

    #[test]
    fn empty_document() {
        let doc = parse_dataset(br#"{"images":[],"annotations":[],"categories":[]}"#).unwrap();
        assert_eq!(doc, DatasetDoc::default());
        assert_eq!(
            String::from_utf8(serialize_dataset(&doc)).unwrap(),
            r#"{"images":[],"annotations":[],"categories":[]}"#
        );
    }

    #[test]
    fn polygon_annotation_area_is_rasterized_count() {
        let raw = br#"{"images":[{"id":1,"file_name":"1640_01.png","width":1920,"height":1440}],
            "categories":[{"id":1,"name":"human"}],
            "annotations":[{"id":1,"image_id":1,"category_id":1,"bbox":[100,200,30.5,40],
              "segmentation":[[100,200,130.5,200,130.5,240,100,240]],"area":1240,"iscrowd":0}]}"#;
        let doc = parse_dataset(raw).unwrap();
        assert_eq!(doc.images.len(), 1);
        assert_eq!(doc.annotations.len(), 1);
        // Columns 100..=129 have centers < 130.5 (30 columns), rows 200..240 (40 rows).
        let mask = doc.annotations[0].segmentation.to_mask(1920, 1440).unwrap();
        assert_eq!(mask.area(), 1200);
        let report = validate_dataset(&doc);
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].rule, Rule::AreaMismatch);
    }

    #[test]
    fn broken_reference() {
        let raw = br#"{"images":[],"categories":[{"id":1,"name":"ball"}],
            "annotations":[{"id":5,"image_id":99,"category_id":1,"bbox":[0,0,1,1],
            "segmentation":{"size":[1,1],"counts":[0,1]},"area":1}]}"#;
        assert!(matches!(
            parse_dataset(raw),
            Err(CocoError::BrokenReference { annotation_id: 5, kind: "image", target_id: 99 })
        ));
    }

    #[test]
    fn negative_bbox_is_geometry_error() {
        let raw = br#"{"images":[{"id":1,"file_name":"x.png","width":4,"height":4}],
            "categories":[{"id":1,"name":"ball"}],
            "annotations":[{"id":5,"image_id":1,"category_id":1,"bbox":[0,0,-1,1],
            "segmentation":{"size":[4,4],"counts":[0,16]},"area":16}]}"#;
        assert!(matches!(parse_dataset(raw), Err(CocoError::GeometryError { annotation_id: 5, .. })));
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(parse_dataset(b"not json"), Err(CocoError::MalformedDocument(_))));
        assert!(matches!(parse_dataset(br#"{"images":[]}"#), Err(CocoError::MalformedDocument(_))));
    }

    #[test]
    fn unknown_keys_round_trip() {
        let raw = br#"{"info":{"year":2022},"images":[{"id":1,"file_name":"x.png","width":4,"height":4,"license":3}],
            "categories":[{"id":1,"name":"ball","supercategory":"sports"}],"annotations":[],"licenses":[]}"#;
        let doc = parse_dataset(raw).unwrap();
        assert_eq!(doc.extra.len(), 2);
        assert_eq!(doc.images[0].extra["license"], 3);
        let again = parse_dataset(&serialize_dataset(&doc)).unwrap();
        assert_eq!(again, doc);
    }

    #[test]
    fn round_trip_and_determinism() {
        let doc = sample_doc();
        let bytes = serialize_dataset(&doc);
        assert_eq!(parse_dataset(&bytes).unwrap(), doc);
        assert_eq!(serialize_dataset(&doc), bytes);
    }

    #[test]
    fn valid_doc_has_empty_report() {
        let doc = sample_doc();
        assert!(validate_dataset(&doc).is_empty());
        assert_eq!(validate_dataset(&doc), validate_dataset(&doc));
    }

    #[test]
    fn bbox_past_right_edge() {
        let mut doc = sample_doc();
        doc.annotations[0].bbox = [6.0, 1.0, 3.0, 3.0];
        let report = validate_dataset(&doc);
        let rules: Vec<_> = report.iter().map(|v| (v.id, v.rule)).collect();
        assert!(rules.contains(&(10, Rule::BboxOutOfImage)));
        assert!(report.iter().all(|v| v.id == 10));
    }

    #[test]
    fn area_mismatch_detected() {
        let mut doc = sample_doc();
        let Segmentation::Rle(rle) = &doc.annotations[1].segmentation else { unreachable!() };
        let decoded = mask::rle_decode(rle).unwrap().area() as f64;
        assert_eq!(decoded, 9.0);
        doc.annotations[1].area = decoded + 1.0;
        let report = validate_dataset(&doc);
        assert_eq!(report.len(), 1);
        assert_eq!((report[0].id, report[0].rule), (11, Rule::AreaMismatch));
    }

    #[test]
    fn reindex_shifts_and_repoints() {
        let doc = sample_doc();
        assert_eq!(reindex(&doc, 0, 0).unwrap(), doc);
        let shifted = reindex(&doc, 100, 1000).unwrap();
        let ids: Vec<u64> = shifted.images.iter().map(|i| i.id).collect();
        assert_eq!(ids, vec![101, 102]);
        assert_eq!(shifted.annotations[0].image_id, 101);
        assert_eq!(shifted.annotations[1].id, 1011);

        let orig_ids: HashSet<u64> = doc.images.iter().map(|i| i.id).collect();
        let new_ids: HashSet<u64> = shifted.images.iter().map(|i| i.id).collect();
        assert!(orig_ids.is_disjoint(&new_ids));
        let orig_ann: HashSet<u64> = doc.annotations.iter().map(|a| a.id).collect();
        let new_ann: HashSet<u64> = shifted.annotations.iter().map(|a| a.id).collect();
        assert!(orig_ann.is_disjoint(&new_ann));

        assert!(matches!(reindex(&doc, u64::MAX, 0), Err(CocoError::IdOverflow { .. })));
    }
}
