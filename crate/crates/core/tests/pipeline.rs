use courtaug::augment::{self, paste::PasteStage, AugmentConfig};
use courtaug::bank::{self, ObjectBank};
use courtaug::coco::{self, ImageRecord};
use courtaug::inference::{self, Detection, FilterConfig};
use courtaug::mask;
use courtaug::metrics;
use courtaug::synth::{self, SceneSpec};

fn spec() -> SceneSpec {
    SceneSpec { width: 480, height: 360, seed: 17, ..SceneSpec::default() }
}

fn pixels(rec: &ImageRecord) -> image::RgbImage {
    synth::corpus_scene(&spec(), (rec.id - 1) as u32).image
}

#[test]
fn corpus_survives_serialization_and_validation() {
    let doc = synth::corpus_doc(5, &spec());
    assert!(coco::validate_dataset(&doc).is_empty());
    let back = coco::parse_dataset(&coco::serialize_dataset(&doc)).unwrap();
    assert_eq!(back, doc);
}

#[test]
fn bank_round_trips_through_disk() {
    let doc = synth::corpus_doc(3, &spec());
    let patches = bank::extract_bank(&doc, |r| Ok(pixels(r))).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = bank::save_bank(&patches, dir.path()).unwrap();
    assert_eq!(manifest.entries.len(), patches.len());
    assert_eq!(bank::load_bank(dir.path()).unwrap(), patches);
}

#[test]
fn duplicated_augmentation_is_valid_and_reproducible() {
    let doc = synth::corpus_doc(4, &spec());
    let bank = ObjectBank::new(bank::extract_bank(&doc, |r| Ok(pixels(r))).unwrap());
    let config = AugmentConfig { seed: 3, ..Default::default() };
    let dup = augment::duplicate_dataset(&doc, 3).unwrap();
    let run = || augment::augment_dataset(&dup, &bank, &config, |r| Ok(pixels(&ImageRecord { id: (r.id - 1) % 5 + 1, ..r.clone() })), |_, _| Ok(())).unwrap();
    let a = run();
    assert_eq!(a.doc.images.len(), 12);
    assert!(coco::validate_dataset(&a.doc).is_empty());
    assert_eq!(a.doc, run().doc);

    // copies of one source image diverge because their ids differ
    let first_of = |k: usize| a.logs[k].pastes.first().map(|p| p.position);
    assert_ne!(first_of(0), first_of(4));
    for log in &a.logs {
        let ((x0, x1), (y0, y1)) = augment::paste::view_bounds(log.view, 480, 360);
        for p in log.pastes.iter().filter(|p| p.stage == PasteStage::View) {
            let (x, y) = (p.position.0 as f64, p.position.1 as f64);
            assert!(x >= x0 && x <= x1 && y >= y0 && y <= y1);
        }
    }
}

#[test]
fn echoed_ground_truth_survives_crop_filter_and_scoring() {
    let base = SceneSpec { height: 1440, width: 640, n_balls: 1, ..spec() };
    let doc = synth::corpus_doc(3, &base);
    let mut all = Vec::new();
    for img in &doc.images {
        let scene = synth::corpus_scene(&base, (img.id - 1) as u32);
        let full: Vec<Detection> = scene
            .annotations
            .iter()
            .map(|a| {
                let m = a.segmentation.to_mask(640, 1440).unwrap();
                Detection { image_id: a.image_id, category_id: a.category_id, score: 0.8, bbox: a.bbox, segmentation: mask::rle_encode(&m) }
            })
            .collect();
        let top = inference::top_offset(1440, 0.2);
        let got = inference::run_tsip(
            &scene.image,
            |cropped| {
                assert_eq!(cropped.height(), 1440 - top);
                let t = inference::CropTransform { image_id: None, file_name: None, top_offset: top, fraction: 0.2, original_width: 640, original_height: 1440 };
                // push the full-frame answers into the cropped frame, dropping anything above the line
                Ok(full
                    .iter()
                    .filter(|d| d.bbox[1] >= top as f64)
                    .map(|d| {
                        let m = mask::rle_decode(&d.segmentation).unwrap().crop(0, t.top_offset, 640, 1440 - top);
                        Detection { bbox: [d.bbox[0], d.bbox[1] - top as f64, d.bbox[2], d.bbox[3]], segmentation: mask::rle_encode(&m), ..d.clone() }
                    })
                    .collect())
            },
            0.2,
            &FilterConfig::new(synth::BALL_CATEGORY),
        )
        .unwrap();
        all.extend(got);
    }
    let result = metrics::evaluate(&doc, &all).unwrap();
    assert!(result.map_overall > 0.0 && result.map_overall <= 1.0);
    for v in result.per_threshold_ap.values() {
        assert!(v.windows(2).all(|w| w[0] >= w[1]));
    }
}
