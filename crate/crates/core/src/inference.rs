//! Inference-side processing: drop the top band of each frame before running a
//! detector, map detections back to the full frame, and keep at most one
//! overlapping cluster of ball detections.

use std::collections::BTreeMap;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{self, Box, MaskError, Rle};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("detection {index}: mask is {actual:?}, expected {expected:?}")]
    DimensionMismatch {
        index: usize,
        expected: (u32, u32),
        actual: (u32, u32),
    },
    #[error("no crop transform for image {0}")]
    MissingTransform(u64),
    #[error("crop fraction {0} outside [0, 1)")]
    BadFraction(f64),
    #[error("detections file does not parse: {0}")]
    Parse(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// One detector output in COCO results form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u64,
    pub score: f64,
    /// `[x, y, width, height]`.
    pub bbox: [f64; 4],
    pub segmentation: Rle,
}

impl Detection {
    pub fn boxed(&self) -> Box {
        Box::from_xywh(self.bbox)
    }
}

pub fn parse_detections(raw: &[u8]) -> Result<Vec<Detection>, InferenceError> {
    serde_json::from_slice(raw).map_err(|e| InferenceError::Parse(e.to_string()))
}

pub fn serialize_detections(dets: &[Detection]) -> Vec<u8> {
    serde_json::to_vec(dets).expect("detections serialize")
}

/// What was removed from the top of a frame, persisted so that detections can
/// be mapped back in a separate run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_name: Option<String>,
    pub top_offset: u32,
    pub fraction: f64,
    pub original_width: u32,
    pub original_height: u32,
}

/// Rows removed for a frame of `height` rows: `floor(height × fraction)`.
///
/// A 1e-9 slack absorbs binary representation error (e.g. `0.3 × 10`), and the
/// result is capped so at least one row survives.
pub fn top_offset(height: u32, fraction: f64) -> u32 {
    let rows = (height as f64 * fraction + 1e-9).floor() as u32;
    rows.min(height.saturating_sub(1))
}

/// Removes the top `floor(h × fraction)` rows.
pub fn crop_top(image: &RgbImage, fraction: f64) -> Result<(RgbImage, CropTransform), InferenceError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(InferenceError::BadFraction(fraction));
    }
    let (w, h) = image.dimensions();
    let top = top_offset(h, fraction);
    let cropped = image::imageops::crop_imm(image, 0, top, w, h - top).to_image();
    Ok((
        cropped,
        CropTransform {
            image_id: None,
            file_name: None,
            top_offset: top,
            fraction,
            original_width: w,
            original_height: h,
        },
    ))
}

/// Maps detections from the cropped frame back into the original one.
pub fn uncrop_detections(dets: &[Detection], t: &CropTransform) -> Result<Vec<Detection>, InferenceError> {
    let expected = (t.original_width, t.original_height - t.top_offset);
    dets.iter()
        .enumerate()
        .map(|(index, d)| {
            let actual = (d.segmentation.width(), d.segmentation.height());
            if actual != expected {
                return Err(InferenceError::DimensionMismatch { index, expected, actual });
            }
            let mut out = d.clone();
            out.bbox[1] += t.top_offset as f64;
            out.segmentation = shift_rle_down(&d.segmentation, t.top_offset);
            Ok(out)
        })
        .collect()
}

/// Embeds a mask under `rows` background rows. Works directly on the runs:
/// each column gains `rows` background pixels at its top.
fn shift_rle_down(rle: &Rle, rows: u32) -> Rle {
    if rows == 0 {
        return rle.clone();
    }
    let (w, h) = (rle.width(), rle.height());
    let new_h = h + rows;
    let mut counts: Vec<u32> = Vec::with_capacity(rle.counts.len() + 2 * w as usize);
    let mut push = |fg: bool, n: u32| {
        // counts alternate bg/fg starting with bg; index parity gives the value
        let last_is_fg = counts.len().is_multiple_of(2);
        if n == 0 {
            return;
        }
        if counts.is_empty() {
            if fg {
                counts.push(0);
            }
            counts.push(n);
        } else if last_is_fg == fg {
            *counts.last_mut().unwrap() += n;
        } else {
            counts.push(n);
        }
    };
    let mut pos_in_col = 0u32;
    for (i, &c) in rle.counts.iter().enumerate() {
        let fg = i % 2 == 1;
        let mut left = c;
        while left > 0 {
            if pos_in_col == 0 {
                push(false, rows);
            }
            let take = left.min(h - pos_in_col);
            push(fg, take);
            left -= take;
            pos_in_col = (pos_in_col + take) % h;
        }
    }
    if counts.is_empty() {
        counts.push(0);
    }
    Rle { size: [new_h, w], counts }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Drop only when both sides are out of range.
    #[default]
    Both,
    /// Drop when either side is out of range.
    Either,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub ball_category: u64,
    pub min_dim: f64,
    pub max_dim: f64,
    pub gate_mode: GateMode,
    /// Size-gate balls before choosing the anchor (otherwise after).
    pub gate_first: bool,
}

impl FilterConfig {
    pub fn new(ball_category: u64) -> Self {
        Self {
            ball_category,
            min_dim: 10.0,
            max_dim: 40.0,
            gate_mode: GateMode::Both,
            gate_first: true,
        }
    }
}

/// `true` keeps the detection.
pub fn ball_size_gate(det: &Detection, min_dim: f64, max_dim: f64, mode: GateMode) -> bool {
    let (w, h) = (det.bbox[2], det.bbox[3]);
    let (small, large) = match mode {
        GateMode::Both => (w < min_dim && h < min_dim, w > max_dim && h > max_dim),
        GateMode::Either => (w < min_dim || h < min_dim, w > max_dim || h > max_dim),
    };
    !(small || large)
}

/// Per-image ball filtering. Non-ball detections pass through unchanged; among
/// balls the highest score (earliest on ties) is kept, and every other ball is
/// kept only if its box overlaps the winner's (IoU > 0). Input order is preserved.
pub fn max_score_filter(dets: &[Detection], cfg: &FilterConfig) -> Vec<Detection> {
    let gate = |d: &Detection| ball_size_gate(d, cfg.min_dim, cfg.max_dim, cfg.gate_mode);
    let balls: Vec<usize> = dets
        .iter()
        .enumerate()
        .filter(|(_, d)| d.category_id == cfg.ball_category)
        .filter(|(_, d)| !cfg.gate_first || gate(d))
        .map(|(i, _)| i)
        .collect();
    let mut anchor: Option<usize> = None;
    for &i in &balls {
        if anchor.is_none_or(|a| dets[i].score > dets[a].score) {
            anchor = Some(i);
        }
    }
    let keep_ball = |i: usize| -> bool {
        let Some(a) = anchor else { return false };
        if !cfg.gate_first && !gate(&dets[i]) {
            return false;
        }
        if !balls.contains(&i) {
            return false;
        }
        i == a || mask::box_iou(&dets[i].boxed(), &dets[a].boxed()) > 0.0
    };
    dets.iter()
        .enumerate()
        .filter(|&(i, d)| d.category_id != cfg.ball_category || keep_ball(i))
        .map(|(_, d)| d.clone())
        .collect()
}

/// Applies [`max_score_filter`] image by image, keeping the overall input order.
pub fn filter_results(dets: &[Detection], cfg: &FilterConfig) -> Vec<Detection> {
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        groups.entry(d.image_id).or_default().push(i);
    }
    let mut keep = vec![false; dets.len()];
    for idx in groups.values() {
        let group: Vec<Detection> = idx.iter().map(|&i| dets[i].clone()).collect();
        let kept = max_score_filter(&group, cfg);
        // kept is a subsequence of group; walk both to mark survivors
        let mut k = 0;
        for (j, d) in group.iter().enumerate() {
            if k < kept.len() && kept[k] == *d {
                keep[idx[j]] = true;
                k += 1;
            }
        }
    }
    dets.iter().zip(keep).filter(|(_, k)| *k).map(|(d, _)| d.clone()).collect()
}

/// Crop, detect on the cropped frame, map back, filter.
pub fn run_tsip<P>(image: &RgbImage, provider: P, fraction: f64, cfg: &FilterConfig) -> Result<Vec<Detection>, InferenceError>
where
    P: FnOnce(&RgbImage) -> Result<Vec<Detection>, InferenceError>,
{
    let (cropped, transform) = crop_top(image, fraction)?;
    let dets = provider(&cropped)?;
    let restored = uncrop_detections(&dets, &transform)?;
    Ok(max_score_filter(&restored, cfg))
}
