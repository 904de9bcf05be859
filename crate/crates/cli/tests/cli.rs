use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use courtaug::coco::{self, AnnotationRecord, DatasetDoc, Extra, ImageRecord};
use courtaug::inference::{self, Detection};
use courtaug::mask::{self, BinaryMask};
use serde_json::Value;
use tempfile::TempDir;

fn courtaug(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_courtaug"))
        .args(args)
        .env_remove("COURTAUG_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = courtaug(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails_with(args: &[&str], code: i32) -> Value {
    let out = courtaug(args);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    let line = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(line.trim()).expect("stderr is one JSON line")
}

struct Work(TempDir);

impl Work {
    fn new() -> Self {
        Work(tempfile::tempdir().unwrap())
    }

    fn p(&self, rel: &str) -> String {
        self.0.path().join(rel).display().to_string()
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.0.path().join(rel)
    }

    /// Small synthetic corpus plus its bank.
    fn corpus(&self, images: &str, height: &str) -> &Self {
        ok(&["synth", "--images", images, "--width", "320", "--height", height, "--seed", "3", &self.p("corpus")]);
        ok(&["extract-bank", "--dataset", &self.p("corpus/annotations.json"), "--images", &self.p("corpus/images"), "--out", &self.p("bank")]);
        self
    }
}

fn read_doc(path: &Path) -> DatasetDoc {
    coco::parse_dataset(&std::fs::read(path).unwrap()).unwrap()
}

fn write_dets(path: &Path, dets: &[Detection]) {
    std::fs::write(path, inference::serialize_detections(dets)).unwrap();
}

fn echo(doc: &DatasetDoc) -> Vec<Detection> {
    doc.annotations
        .iter()
        .map(|a| {
            let img = doc.image(a.image_id).unwrap();
            let m = a.segmentation.to_mask(img.width, img.height).unwrap();
            Detection { image_id: a.image_id, category_id: a.category_id, score: 0.9, bbox: a.bbox, segmentation: mask::rle_encode(&m) }
        })
        .collect()
}

#[test]
fn synth_is_deterministic() {
    let w = Work::new();
    for dir in ["a", "b"] {
        ok(&["synth", "--images", "3", "--width", "320", "--height", "240", "--seed", "8", &w.p(dir)]);
    }
    assert_eq!(std::fs::read(w.path("a/annotations.json")).unwrap(), std::fs::read(w.path("b/annotations.json")).unwrap());
    for f in std::fs::read_dir(w.path("a/images")).unwrap() {
        let name = f.unwrap().file_name();
        assert_eq!(std::fs::read(w.path("a/images").join(&name)).unwrap(), std::fs::read(w.path("b/images").join(&name)).unwrap());
    }
    let m: Value = serde_json::from_slice(&std::fs::read(w.path("a/run_manifest.json")).unwrap()).unwrap();
    assert_eq!(m["subcommand"], "synth");
    assert_eq!(m["seed"], 8);
}

#[test]
fn augment_writes_valid_output_and_reruns_from_manifest() {
    let w = Work::new();
    w.corpus("2", "240");
    let common = ["augment", "--dataset", &w.p("corpus/annotations.json"), "--images", &w.p("corpus/images"), "--bank", &w.p("bank")];
    let (aug1, aug2) = (w.p("aug1"), w.p("aug2"));
    let mut first = common.to_vec();
    first.extend(["--out", &aug1, "--seed", "12", "--duplication-factor", "2"]);
    ok(&first);
    let doc = read_doc(&w.path("aug1/annotations.json"));
    assert_eq!(doc.images.len(), 4);
    assert!(coco::validate_dataset(&doc).is_empty());
    for img in &doc.images {
        assert!(w.path("aug1/images").join(&img.file_name).is_file());
    }

    let manifest = w.p("aug1/run_manifest.json");
    let mut again = common.to_vec();
    again.extend(["--out", &aug2, "--config", &manifest]);
    ok(&again);
    assert_eq!(std::fs::read(w.path("aug1/annotations.json")).unwrap(), std::fs::read(w.path("aug2/annotations.json")).unwrap());
    assert_eq!(std::fs::read(w.path("aug1/paste_log.json")).unwrap(), std::fs::read(w.path("aug2/paste_log.json")).unwrap());
}

#[test]
fn seed_from_environment() {
    let w = Work::new();
    let run = |seed: &str, out: &str| {
        let s = Command::new(env!("CARGO_BIN_EXE_courtaug"))
            .args(["synth", "--images", "1", "--width", "320", "--height", "240", &w.p(out)])
            .env("COURTAUG_SEED", seed)
            .output()
            .unwrap();
        assert!(s.status.success());
        std::fs::read(w.path(out).join("annotations.json")).unwrap()
    };
    assert_eq!(run("5", "a"), run("5", "b"));
    assert_ne!(run("5", "a"), run("6", "c"));
}

#[test]
fn empty_bank_is_an_input_error() {
    let w = Work::new();
    w.corpus("1", "240");
    let mut doc = read_doc(&w.path("corpus/annotations.json"));
    doc.annotations.clear();
    std::fs::write(w.path("empty.json"), coco::serialize_dataset(&doc)).unwrap();
    ok(&["extract-bank", "--dataset", &w.p("empty.json"), "--images", &w.p("corpus/images"), "--out", &w.p("ebank")]);
    let err = fails_with(
        &["augment", "--dataset", &w.p("corpus/annotations.json"), "--images", &w.p("corpus/images"), "--bank", &w.p("ebank"), "--out", &w.p("aug")],
        2,
    );
    assert_eq!(err["error"], "input");
}

#[test]
fn missing_image_is_an_io_error() {
    let w = Work::new();
    w.corpus("1", "240");
    std::fs::create_dir(w.path("none")).unwrap();
    let err = fails_with(&["extract-bank", "--dataset", &w.p("corpus/annotations.json"), "--images", &w.p("none"), "--out", &w.p("b")], 3);
    assert!(err["path"].as_str().unwrap().ends_with(".png"));
}

#[test]
fn crop_then_uncrop() {
    let w = Work::new();
    w.corpus("2", "1440");
    ok(&["crop", "--images", &w.p("corpus/images"), "--dataset", &w.p("corpus/annotations.json"), "--out", &w.p("crop")]);
    let doc = read_doc(&w.path("corpus/annotations.json"));
    for img in &doc.images {
        let c = image::open(w.path("crop").join(&img.file_name)).unwrap();
        assert_eq!((c.width(), c.height()), (320, 1152));
    }

    // a detection at the top of the cropped frame lands 288 rows lower
    let m = BinaryMask::from_fn(320, 1152, |x, y| x < 4 && y < 3);
    let det = Detection { image_id: doc.images[0].id, category_id: 2, score: 0.5, bbox: [0.0, 0.0, 4.0, 3.0], segmentation: mask::rle_encode(&m) };
    write_dets(&w.path("cropped.json"), &[det]);
    ok(&["uncrop", "--results", &w.p("cropped.json"), "--transforms", &w.p("crop/crop_transforms.json"), "--out", &w.p("full.json")]);
    let full = inference::parse_detections(&std::fs::read(w.path("full.json")).unwrap()).unwrap();
    assert_eq!(full[0].bbox, [0.0, 288.0, 4.0, 3.0]);
    let fm = mask::rle_decode(&full[0].segmentation).unwrap();
    assert_eq!(fm.dims(), (320, 1440));
    assert!(fm.get(3, 290) && !fm.get(3, 287) && !fm.get(3, 291));
}

#[test]
fn crop_fraction_zero_copies_files() {
    let w = Work::new();
    w.corpus("1", "240");
    ok(&["crop", "--images", &w.p("corpus/images"), "--fraction", "0", "--out", &w.p("crop")]);
    let name = std::fs::read_dir(w.path("corpus/images")).unwrap().next().unwrap().unwrap().file_name();
    assert_eq!(std::fs::read(w.path("corpus/images").join(&name)).unwrap(), std::fs::read(w.path("crop").join(&name)).unwrap());
}

#[test]
fn uncrop_without_sidecar_is_an_io_error() {
    let w = Work::new();
    write_dets(&w.path("r.json"), &[]);
    fails_with(&["uncrop", "--results", &w.p("r.json"), "--transforms", &w.p("missing.json"), "--out", &w.p("o.json")], 3);
}

fn det(category_id: u64, score: f64, bbox: [f64; 4]) -> Detection {
    Detection { image_id: 1, category_id, score, bbox, segmentation: mask::Rle { size: [100, 100], counts: vec![10_000] } }
}

#[test]
fn filter_keeps_best_ball_and_overlaps() {
    let w = Work::new();
    let dets = vec![
        det(2, 0.9, [10.0, 10.0, 20.0, 20.0]),
        det(1, 0.8, [0.0, 0.0, 50.0, 90.0]),
        det(2, 0.7, [25.0, 25.0, 20.0, 20.0]),
        det(2, 0.95, [70.0, 70.0, 5.0, 5.0]),
        det(2, 0.6, [60.0, 10.0, 20.0, 20.0]),
    ];
    write_dets(&w.path("r.json"), &dets);
    let stdout = ok(&["filter", "--results", &w.p("r.json"), "--out", &w.p("f.json")]);
    assert_eq!(stdout.trim(), "kept 3 of 5 detections");
    let kept = inference::parse_detections(&std::fs::read(w.path("f.json")).unwrap()).unwrap();
    assert_eq!(kept, vec![dets[0].clone(), dets[1].clone(), dets[2].clone()]);

    write_dets(&w.path("e.json"), &[]);
    ok(&["filter", "--results", &w.p("e.json"), "--out", &w.p("fe.json")]);
    assert!(inference::parse_detections(&std::fs::read(w.path("fe.json")).unwrap()).unwrap().is_empty());
}

#[test]
fn eval_echo_scores_one() {
    let w = Work::new();
    w.corpus("2", "240");
    let doc = read_doc(&w.path("corpus/annotations.json"));
    write_dets(&w.path("echo.json"), &echo(&doc));
    let table = ok(&["eval", "--gt", &w.p("corpus/annotations.json"), "--results", &w.p("echo.json"), "--out", &w.p("report.json")]);
    assert!(table.lines().last().unwrap().ends_with("1.000"), "{table}");
    let report: Value = serde_json::from_slice(&std::fs::read(w.path("report.json")).unwrap()).unwrap();
    assert_eq!(report["map_overall"], 1.0);
}

#[test]
fn eval_partial_overlap_fixture() {
    let w = Work::new();
    let gt = BinaryMask::from_fn(10, 10, |x, y| x < 5 && y < 2);
    let doc = DatasetDoc {
        images: vec![ImageRecord { id: 1, file_name: "0_a.png".into(), width: 10, height: 10, extra: Extra::new() }],
        annotations: vec![AnnotationRecord::from_mask(1, 1, 1, &gt).unwrap()],
        categories: courtaug::synth::categories(),
        extra: Extra::new(),
    };
    std::fs::write(w.path("gt.json"), coco::serialize_dataset(&doc)).unwrap();
    let dm = BinaryMask::from_fn(10, 10, |x, y| x < 3 && y < 2);
    write_dets(&w.path("r.json"), &[Detection { image_id: 1, category_id: 1, score: 0.9, bbox: [0.0, 0.0, 3.0, 2.0], segmentation: mask::rle_encode(&dm) }]);
    let table = ok(&["eval", "--gt", &w.p("gt.json"), "--results", &w.p("r.json")]);
    assert!(table.lines().last().unwrap().ends_with("0.300"), "{table}");
}

#[test]
fn eval_unknown_image_is_an_input_error() {
    let w = Work::new();
    w.corpus("1", "240");
    let mut d = det(1, 0.5, [0.0, 0.0, 1.0, 1.0]);
    d.image_id = 999;
    write_dets(&w.path("bad.json"), &[d]);
    let err = fails_with(&["eval", "--gt", &w.p("corpus/annotations.json"), "--results", &w.p("bad.json")], 2);
    assert!(err["message"].as_str().unwrap().contains("999"));
}
