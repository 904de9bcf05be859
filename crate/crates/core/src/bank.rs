//! Object bank: every annotated object cropped out of its source image,
//! stored as a lossless RGB patch plus a 1-bit mask.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coco::{DatasetDoc, ImageRecord};
use crate::mask::{self, BinaryMask, MaskError};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum BankError {
    #[error("failed to load image {path}: {reason}")]
    ImageLoadFailure { path: String, reason: String },
    #[error("image {image_id} is {actual:?}, declared {declared:?}")]
    DimensionMismatch {
        image_id: u64,
        declared: (u32, u32),
        actual: (u32, u32),
    },
    #[error("annotation {annotation_id}: {source}")]
    Mask {
        annotation_id: u64,
        #[source]
        source: MaskError,
    },
    #[error("no manifest at {0}")]
    ManifestMissing(PathBuf),
    #[error("bank entry {index} ({path}): {reason}")]
    CorruptEntry { index: usize, path: String, reason: String },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectPatch {
    pub category_id: u64,
    pub pixels: RgbImage,
    pub mask: BinaryMask,
    pub source_image_id: u64,
    pub source_annotation_id: u64,
}

impl ObjectPatch {
    pub fn width(&self) -> u32 {
        self.mask.width()
    }

    pub fn height(&self) -> u32 {
        self.mask.height()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub image: String,
    pub mask: String,
    pub category_id: u64,
    pub source_image_id: u64,
    pub source_annotation_id: u64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BankManifest {
    pub entries: Vec<BankEntry>,
}

/// Patches grouped by category for paste sampling.
#[derive(Debug, Clone, Default)]
pub struct ObjectBank {
    patches: Vec<ObjectPatch>,
    by_category: BTreeMap<u64, Vec<usize>>,
}

impl ObjectBank {
    pub fn new(patches: Vec<ObjectPatch>) -> Self {
        let mut by_category: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, p) in patches.iter().enumerate() {
            by_category.entry(p.category_id).or_default().push(i);
        }
        Self { patches, by_category }
    }

    pub fn patches(&self) -> &[ObjectPatch] {
        &self.patches
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Bank indices of every patch in `category_id`.
    pub fn indices_for(&self, category_id: u64) -> &[usize] {
        self.by_category.get(&category_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn get(&self, index: usize) -> &ObjectPatch {
        &self.patches[index]
    }
}

/// Crops one patch per nonzero-area annotation, tight to the decoded mask.
/// Output follows annotation order in `doc`.
pub fn extract_bank<F>(doc: &DatasetDoc, image_loader: F) -> Result<Vec<ObjectPatch>, BankError>
where
    F: Fn(&ImageRecord) -> Result<RgbImage, BankError> + Sync,
{
    let mut by_image: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, a) in doc.annotations.iter().enumerate() {
        by_image.entry(a.image_id).or_default().push(i);
    }
    let per_image: Vec<Vec<(usize, ObjectPatch)>> = doc
        .images
        .par_iter()
        .filter(|img| by_image.contains_key(&img.id))
        .map(|img| {
            let pixels = image_loader(img)?;
            if pixels.dimensions() != (img.width, img.height) {
                return Err(BankError::DimensionMismatch {
                    image_id: img.id,
                    declared: (img.width, img.height),
                    actual: pixels.dimensions(),
                });
            }
            let mut out = Vec::new();
            for &i in &by_image[&img.id] {
                let ann = &doc.annotations[i];
                let full = ann
                    .segmentation
                    .to_mask(img.width, img.height)
                    .map_err(|source| BankError::Mask { annotation_id: ann.id, source })?;
                if let Some(patch) = crop_patch(&pixels, &full, ann.category_id, img.id, ann.id) {
                    out.push((i, patch));
                }
            }
            Ok(out)
        })
        .collect::<Result<_, _>>()?;

    let mut flat: Vec<(usize, ObjectPatch)> = per_image.into_iter().flatten().collect();
    flat.sort_by_key(|(i, _)| *i);
    Ok(flat.into_iter().map(|(_, p)| p).collect())
}

/// Cuts the tight bbox of `mask` out of `image`. `None` when the mask is empty.
pub fn crop_patch(
    image: &RgbImage,
    mask: &BinaryMask,
    category_id: u64,
    source_image_id: u64,
    source_annotation_id: u64,
) -> Option<ObjectPatch> {
    let b = mask::mask_bbox(mask)?;
    let (x, y, w, h) = (b.x_min as u32, b.y_min as u32, b.width() as u32, b.height() as u32);
    let pixels = image::imageops::crop_imm(image, x, y, w, h).to_image();
    Some(ObjectPatch {
        category_id,
        pixels,
        mask: mask.crop(x, y, w, h),
        source_image_id,
        source_annotation_id,
    })
}

pub fn save_bank(patches: &[ObjectPatch], directory: &Path) -> Result<BankManifest, BankError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| BankError::Io { path, source }
    };
    let patch_dir = directory.join("patches");
    fs::create_dir_all(&patch_dir).map_err(io(&patch_dir))?;

    let entries = patches
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let image = format!("patches/{i:06}.png");
            let mask = format!("patches/{i:06}_mask.png");
            let image_path = directory.join(&image);
            p.pixels.save(&image_path).map_err(|e| BankError::Io {
                path: image_path.clone(),
                source: std::io::Error::other(e),
            })?;
            write_mask_png(&p.mask, &directory.join(&mask))?;
            Ok(BankEntry {
                image,
                mask,
                category_id: p.category_id,
                source_image_id: p.source_image_id,
                source_annotation_id: p.source_annotation_id,
                width: p.width(),
                height: p.height(),
            })
        })
        .collect::<Result<Vec<_>, BankError>>()?;

    let manifest = BankManifest { entries };
    let path = directory.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(io(&path))?;
    Ok(manifest)
}

pub fn load_bank(directory: &Path) -> Result<Vec<ObjectPatch>, BankError> {
    let path = directory.join(MANIFEST_FILE);
    let raw = fs::read(&path).map_err(|_| BankError::ManifestMissing(path.clone()))?;
    let manifest: BankManifest = serde_json::from_slice(&raw).map_err(|e| BankError::CorruptEntry {
        index: 0,
        path: path.display().to_string(),
        reason: format!("manifest does not parse: {e}"),
    })?;

    manifest
        .entries
        .par_iter()
        .enumerate()
        .map(|(index, e)| {
            let corrupt = |path: &str, reason: String| BankError::CorruptEntry {
                index,
                path: path.to_string(),
                reason,
            };
            let pixels = image::open(directory.join(&e.image))
                .map_err(|err| corrupt(&e.image, err.to_string()))?
                .to_rgb8();
            let mask = read_mask_png(&directory.join(&e.mask)).map_err(|reason| corrupt(&e.mask, reason))?;
            if pixels.dimensions() != (e.width, e.height) {
                return Err(corrupt(&e.image, format!("is {:?}, manifest says {}x{}", pixels.dimensions(), e.width, e.height)));
            }
            if mask.dims() != (e.width, e.height) {
                return Err(corrupt(&e.mask, format!("is {:?}, manifest says {}x{}", mask.dims(), e.width, e.height)));
            }
            Ok(ObjectPatch {
                category_id: e.category_id,
                pixels,
                mask,
                source_image_id: e.source_image_id,
                source_annotation_id: e.source_annotation_id,
            })
        })
        .collect()
}

/// Writes a 1-bit grayscale PNG (foreground = white).
pub fn write_mask_png(mask: &BinaryMask, path: &Path) -> Result<(), BankError> {
    let io = |source| BankError::Io { path: path.to_path_buf(), source };
    let file = fs::File::create(path).map_err(io)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), mask.width(), mask.height());
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::One);
    let stride = mask.width().div_ceil(8) as usize;
    let mut packed = vec![0u8; stride * mask.height() as usize];
    for y in 0..mask.height() {
        for (x, &v) in mask.row(y).iter().enumerate() {
            if v != 0 {
                packed[y as usize * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let mut writer = encoder.write_header().map_err(|e| io(std::io::Error::other(e)))?;
    writer.write_image_data(&packed).map_err(|e| io(std::io::Error::other(e)))?;
    writer.finish().map_err(|e| io(std::io::Error::other(e)))?;
    Ok(())
}

pub fn read_mask_png(path: &Path) -> Result<BinaryMask, String> {
    let file = fs::File::open(path).map_err(|e| e.to_string())?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::One {
        return Err(format!("expected 1-bit grayscale, got {:?} {:?}", info.color_type, info.bit_depth));
    }
    let (width, height) = (info.width, info.height);
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or("image too large")?];
    let frame = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let stride = frame.line_size;
    let mut mask = BinaryMask::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let byte = buf[y as usize * stride + x as usize / 8];
            if byte & (0x80 >> (x % 8)) != 0 {
                mask.set(x, y, true);
            }
        }
    }
    Ok(mask)
}
