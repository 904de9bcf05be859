//! Subcommand implementations for the `courtaug` binary. Each command reads
//! its inputs from files, writes its outputs to files, and leaves a
//! `RunManifest` describing the run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use courtaug::augment::{self, AugmentConfig, AugmentError, ViewSide};
use courtaug::bank::{self, BankError, ObjectBank};
use courtaug::coco::{self, CocoError, DatasetDoc, ImageRecord};
use courtaug::inference::{self, CropTransform, FilterConfig, GateMode, InferenceError};
use courtaug::metrics::{self, MetricsError};
use courtaug::synth::{self, SceneSpec, SynthError};
use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const TRANSFORMS_FILE: &str = "crop_transforms.json";
pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(name = "courtaug", version, about = "Copy-paste augmentation and inference tooling for court footage")]
pub struct Cli {
    /// Where to write the run manifest (defaults next to the outputs).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic corpus with exact ground truth.
    Synth(SynthArgs),
    /// Cut every annotated object out of its image into a patch bank.
    ExtractBank(ExtractBankArgs),
    /// Duplicate a dataset and augment every copy.
    Augment(AugmentArgs),
    /// Remove the top band of each image before inference.
    Crop(CropArgs),
    /// Map detections on cropped images back to the full frame.
    Uncrop(UncropArgs),
    /// Size-gate balls and keep the best-scoring overlapping group per image.
    Filter(FilterArgs),
    /// Mask AP against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    pub images: u32,
    #[arg(long, env = "COURTAUG_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub persons: u32,
    #[arg(long, default_value_t = 1)]
    pub balls: u32,
    #[arg(long, default_value_t = 1920)]
    pub width: u32,
    #[arg(long, default_value_t = 1440)]
    pub height: u32,
    #[arg(long, default_value_t = 0.3)]
    pub occlusion_prob: f64,
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtractBankArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    /// TOML or JSON config, or a previous run manifest.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "COURTAUG_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub duplication_factor: Option<u32>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct CropArgs {
    #[arg(long)]
    pub images: PathBuf,
    /// Decimal or `a/b`.
    #[arg(long, default_value = "1/5", value_parser = parse_fraction)]
    pub fraction: f64,
    /// Dataset used to attach image ids to the transforms.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct UncropArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub transforms: PathBuf,
    /// Resolves file names to image ids for transforms written without a dataset.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GateArg {
    Both,
    Either,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long, default_value_t = synth::BALL_CATEGORY)]
    pub ball_category: u64,
    #[arg(long, default_value_t = 10.0)]
    pub min_dim: f64,
    #[arg(long, default_value_t = 40.0)]
    pub max_dim: f64,
    #[arg(long, value_enum, default_value_t = GateArg::Both)]
    pub gate_mode: GateArg,
    /// Apply the size gate after choosing the top-scoring ball.
    #[arg(long)]
    pub gate_after_max: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub results: PathBuf,
    /// Also write the result as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn parse_fraction(s: &str) -> Result<f64, String> {
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| format!("bad numerator in {s:?}"))?;
            let b: f64 = b.trim().parse().map_err(|_| format!("bad denominator in {s:?}"))?;
            a / b
        }
        None => s.trim().parse().map_err(|_| format!("bad fraction {s:?}"))?,
    };
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("fraction {s} outside [0, 1)"))
    }
}

/// Failure classes with fixed exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Io { .. } => 3,
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> String {
        let v = match self {
            CliError::Input(m) => json!({"error": "input", "code": 2, "message": m}),
            CliError::Io { path, reason } => json!({"error": "io", "code": 3, "path": path, "message": reason}),
        };
        v.to_string()
    }

    fn input(e: impl std::fmt::Display) -> Self {
        CliError::Input(e.to_string())
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io { path: path.to_path_buf(), reason: e.to_string() }
}

impl From<CocoError> for CliError {
    fn from(e: CocoError) -> Self {
        CliError::input(e)
    }
}

impl From<BankError> for CliError {
    fn from(e: BankError) -> Self {
        match e {
            BankError::ImageLoadFailure { ref path, .. } | BankError::CorruptEntry { ref path, .. } => {
                CliError::Io { path: PathBuf::from(path), reason: e.to_string() }
            }
            BankError::ManifestMissing(ref p) | BankError::Io { path: ref p, .. } => CliError::Io { path: p.clone(), reason: e.to_string() },
            BankError::DimensionMismatch { .. } | BankError::Mask { .. } => CliError::input(e),
        }
    }
}

impl From<AugmentError> for CliError {
    fn from(e: AugmentError) -> Self {
        match e {
            AugmentError::Image { ref reason, .. } => {
                let path = reason.split(": ").next().unwrap_or_default();
                CliError::Io { path: PathBuf::from(path), reason: e.to_string() }
            }
            other => CliError::input(other),
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        CliError::input(e)
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::input(e)
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::IoFailure { ref path, .. } => io_err(path, &e),
        }
    }
}

/// Record of one successful invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub duration_secs: f64,
}

impl RunManifest {
    fn new(subcommand: &str, config: Value, seed: Option<u64>) -> Self {
        Self {
            tool: "courtaug".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            config,
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            duration_secs: 0.0,
        }
    }

    fn input(mut self, key: &str, p: &Path) -> Self {
        self.inputs.insert(key.into(), p.to_path_buf());
        self
    }

    fn output(mut self, key: &str, p: &Path) -> Self {
        self.outputs.insert(key.into(), p.to_path_buf());
        self
    }
}

/// What a command produced: its manifest, default manifest location, and
/// text for stdout.
pub struct Outcome {
    pub manifest: RunManifest,
    pub manifest_path: Option<PathBuf>,
    pub stdout: String,
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| io_err(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn mkdir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("serializable");
    out.push(b'\n');
    out
}

fn load_dataset(path: &Path) -> Result<DatasetDoc, CliError> {
    Ok(coco::parse_dataset(&read(path)?)?)
}

fn load_rgb(path: &Path) -> Result<RgbImage, CliError> {
    let img = image::open(path).map_err(|e| io_err(path, e))?;
    Ok(img.to_rgb8())
}

fn file_sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

/// Runs a parsed command line and writes its manifest.
pub fn run(cli: Cli) -> Result<String, CliError> {
    let start = Instant::now();
    let mut outcome = match cli.command {
        Command::Synth(a) => cmd_synth(&a)?,
        Command::ExtractBank(a) => cmd_extract_bank(&a)?,
        Command::Augment(a) => cmd_augment(&a)?,
        Command::Crop(a) => cmd_crop(&a)?,
        Command::Uncrop(a) => cmd_uncrop(&a)?,
        Command::Filter(a) => cmd_filter(&a)?,
        Command::Eval(a) => cmd_eval(&a)?,
    };
    outcome.manifest.duration_secs = start.elapsed().as_secs_f64();
    let bytes = pretty(&outcome.manifest);
    match cli.manifest.or(outcome.manifest_path) {
        Some(p) => write(&p, &bytes)?,
        None => eprintln!("{}", serde_json::to_string(&outcome.manifest).expect("serializable")),
    }
    Ok(outcome.stdout)
}

pub fn cmd_synth(a: &SynthArgs) -> Result<Outcome, CliError> {
    if !(0.0..=1.0).contains(&a.occlusion_prob) {
        return Err(CliError::Input(format!("occlusion probability {} outside [0, 1]", a.occlusion_prob)));
    }
    let spec = SceneSpec {
        width: a.width,
        height: a.height,
        n_persons: a.persons,
        n_balls: a.balls,
        view: ViewSide::Right,
        seed: a.seed,
        occlusion_prob: a.occlusion_prob,
    };
    mkdir(&a.out_dir)?;
    let doc = synth::generate_corpus(a.images, &spec, &a.out_dir)?;
    let ann = a.out_dir.join("annotations.json");
    write(&ann, &coco::serialize_dataset(&doc))?;
    let mut config = serde_json::to_value(spec).expect("serializable");
    config["images"] = json!(a.images);
    let manifest = RunManifest::new("synth", config, Some(a.seed))
        .output("images", &a.out_dir.join("images"))
        .output("annotations", &ann);
    Ok(Outcome {
        manifest,
        manifest_path: Some(a.out_dir.join(MANIFEST_FILE)),
        stdout: format!("wrote {} images, {} annotations\n", doc.images.len(), doc.annotations.len()),
    })
}

fn image_loader(dir: &Path) -> impl Fn(&ImageRecord) -> Result<RgbImage, BankError> + Sync + '_ {
    move |rec| {
        let path = dir.join(&rec.file_name);
        image::open(&path)
            .map(|i| i.to_rgb8())
            .map_err(|e| BankError::ImageLoadFailure { path: path.display().to_string(), reason: e.to_string() })
    }
}

pub fn cmd_extract_bank(a: &ExtractBankArgs) -> Result<Outcome, CliError> {
    let doc = load_dataset(&a.dataset)?;
    let patches = bank::extract_bank(&doc, image_loader(&a.images))?;
    let manifest_out = bank::save_bank(&patches, &a.out)?;
    let manifest = RunManifest::new("extract-bank", json!({}), None)
        .input("dataset", &a.dataset)
        .input("images", &a.images)
        .output("bank", &a.out);
    Ok(Outcome {
        manifest,
        manifest_path: Some(a.out.join(MANIFEST_FILE)),
        stdout: format!("extracted {} patches\n", manifest_out.entries.len()),
    })
}

/// Reads a config from TOML, JSON, or the `config` field of a run manifest.
pub fn load_config(path: &Path) -> Result<AugmentConfig, CliError> {
    let text = String::from_utf8(read(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('{');
    let cfg = if is_json {
        let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let inner = match v.get("config") {
            Some(c) if v.get("subcommand").is_some() => c.clone(),
            _ => v,
        };
        AugmentConfig::from_json(&inner.to_string())
    } else {
        AugmentConfig::from_toml(&text)
    };
    cfg.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn resolve_augment_config(a: &AugmentArgs) -> Result<AugmentConfig, CliError> {
    let mut cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => AugmentConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(k) = a.duplication_factor {
        cfg.duplication_factor = k;
    }
    cfg.validate().map_err(CliError::input)?;
    Ok(cfg)
}

pub fn cmd_augment(a: &AugmentArgs) -> Result<Outcome, CliError> {
    if a.jobs == 0 {
        return Err(CliError::Input("--jobs must be at least 1".into()));
    }
    let cfg = resolve_augment_config(a)?;
    let doc = load_dataset(&a.dataset)?;
    let patches = bank::load_bank(&a.bank)?;
    let bank = ObjectBank::new(patches);
    let dup = augment::duplicate_dataset(&doc, cfg.duplication_factor)?;

    let images_out = a.out.join("images");
    mkdir(&images_out)?;
    let load = |rec: &ImageRecord| {
        let path = a.images.join(&rec.file_name);
        image::open(&path).map(|i| i.to_rgb8()).map_err(|e| AugmentError::Image {
            image_id: rec.id,
            reason: format!("{}: {e}", path.display()),
        })
    };
    let store = |rec: &ImageRecord, img: &RgbImage| {
        let path = images_out.join(&rec.file_name);
        img.save_with_format(&path, image::ImageFormat::Png).map_err(|e| AugmentError::Image {
            image_id: rec.id,
            reason: format!("{}: {e}", path.display()),
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs)
        .build()
        .map_err(|e| CliError::Input(e.to_string()))?;
    let result = pool.install(|| augment::augment_dataset(&dup, &bank, &cfg, load, store))?;

    let violations = coco::validate_dataset(&result.doc);
    let ann = a.out.join("annotations.json");
    let log = a.out.join("paste_log.json");
    write(&ann, &coco::serialize_dataset(&result.doc))?;
    write(&log, &pretty(&result.logs))?;
    if !violations.is_empty() {
        return Err(CliError::Input(format!(
            "augmented dataset failed validation: {}",
            serde_json::to_string(&violations).expect("serializable")
        )));
    }
    let manifest = RunManifest::new("augment", serde_json::to_value(&cfg).expect("serializable"), Some(cfg.seed))
        .input("dataset", &a.dataset)
        .input("images", &a.images)
        .input("bank", &a.bank)
        .output("images", &images_out)
        .output("annotations", &ann)
        .output("paste_log", &log);
    Ok(Outcome {
        manifest,
        manifest_path: Some(a.out.join(MANIFEST_FILE)),
        stdout: format!(
            "augmented {} images, {} annotations\n",
            result.doc.images.len(),
            result.doc.annotations.len()
        ),
    })
}

fn list_images(dir: &Path) -> Result<Vec<String>, CliError> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let entry = entry.map_err(|e| io_err(dir, e))?;
        let is_png = entry.path().extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && entry.path().is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

pub fn cmd_crop(a: &CropArgs) -> Result<Outcome, CliError> {
    let names: Vec<(Option<u64>, String)> = match &a.dataset {
        Some(p) => load_dataset(p)?.images.into_iter().map(|i| (Some(i.id), i.file_name)).collect(),
        None => list_images(&a.images)?.into_iter().map(|n| (None, n)).collect(),
    };
    mkdir(&a.out)?;
    let mut transforms = Vec::with_capacity(names.len());
    for (image_id, name) in names {
        let src = a.images.join(&name);
        let dst = a.out.join(&name);
        let img = load_rgb(&src)?;
        let (cropped, mut t) = inference::crop_top(&img, a.fraction)?;
        if t.top_offset == 0 {
            fs::copy(&src, &dst).map_err(|e| io_err(&dst, e))?;
        } else {
            cropped.save_with_format(&dst, image::ImageFormat::Png).map_err(|e| io_err(&dst, e))?;
        }
        t.image_id = image_id;
        t.file_name = Some(name);
        transforms.push(t);
    }
    let sidecar = a.out.join(TRANSFORMS_FILE);
    write(&sidecar, &pretty(&transforms))?;
    let manifest = RunManifest::new("crop", json!({"fraction": a.fraction}), None)
        .input("images", &a.images)
        .output("images", &a.out)
        .output("transforms", &sidecar);
    let manifest = match &a.dataset {
        Some(p) => manifest.input("dataset", p),
        None => manifest,
    };
    Ok(Outcome {
        manifest,
        manifest_path: Some(a.out.join(MANIFEST_FILE)),
        stdout: format!("cropped {} images\n", transforms.len()),
    })
}

pub fn cmd_uncrop(a: &UncropArgs) -> Result<Outcome, CliError> {
    let transforms: Vec<CropTransform> =
        serde_json::from_slice(&read(&a.transforms)?).map_err(|e| CliError::Input(format!("{}: {e}", a.transforms.display())))?;
    let dets = inference::parse_detections(&read(&a.results)?)?;
    let by_name: BTreeMap<String, u64> = match &a.dataset {
        Some(p) => load_dataset(p)?.images.into_iter().map(|i| (i.file_name, i.id)).collect(),
        None => BTreeMap::new(),
    };
    let mut by_id: BTreeMap<u64, &CropTransform> = BTreeMap::new();
    for t in &transforms {
        let id = t.image_id.or_else(|| t.file_name.as_ref().and_then(|n| by_name.get(n).copied()));
        if let Some(id) = id {
            by_id.insert(id, t);
        }
    }
    let mut out = Vec::with_capacity(dets.len());
    for d in &dets {
        let t = by_id.get(&d.image_id).ok_or(InferenceError::MissingTransform(d.image_id))?;
        out.extend(inference::uncrop_detections(std::slice::from_ref(d), t)?);
    }
    write(&a.out, &inference::serialize_detections(&out))?;
    let manifest = RunManifest::new("uncrop", json!({}), None)
        .input("results", &a.results)
        .input("transforms", &a.transforms)
        .output("results", &a.out);
    Ok(Outcome {
        manifest,
        manifest_path: Some(file_sibling(&a.out, ".manifest.json")),
        stdout: format!("uncropped {} detections\n", out.len()),
    })
}

pub fn cmd_filter(a: &FilterArgs) -> Result<Outcome, CliError> {
    let dets = inference::parse_detections(&read(&a.results)?)?;
    let cfg = FilterConfig {
        ball_category: a.ball_category,
        min_dim: a.min_dim,
        max_dim: a.max_dim,
        gate_mode: match a.gate_mode {
            GateArg::Both => GateMode::Both,
            GateArg::Either => GateMode::Either,
        },
        gate_first: !a.gate_after_max,
    };
    let kept = inference::filter_results(&dets, &cfg);
    write(&a.out, &inference::serialize_detections(&kept))?;
    let manifest = RunManifest::new("filter", serde_json::to_value(cfg).expect("serializable"), None)
        .input("results", &a.results)
        .output("results", &a.out);
    Ok(Outcome {
        manifest,
        manifest_path: Some(file_sibling(&a.out, ".manifest.json")),
        stdout: format!("kept {} of {} detections\n", kept.len(), dets.len()),
    })
}

pub fn cmd_eval(a: &EvalArgs) -> Result<Outcome, CliError> {
    let gt = load_dataset(&a.gt)?;
    let dets = inference::parse_detections(&read(&a.results)?)?;
    let result = metrics::evaluate(&gt, &dets)?;
    let mut manifest = RunManifest::new("eval", json!({}), None).input("gt", &a.gt).input("results", &a.results);
    let mut manifest_path = None;
    if let Some(out) = &a.out {
        write(out, &pretty(&result))?;
        manifest = manifest.output("report", out);
        manifest_path = Some(file_sibling(out, ".manifest.json"));
    }
    Ok(Outcome { manifest, manifest_path, stdout: result.render_table() })
}
