//! Mask-IoU average precision with COCO-style greedy matching and 101-point
//! interpolation.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coco::{CocoError, DatasetDoc};
use crate::inference::Detection;
use crate::mask::{self, BinaryMask, MaskError};

/// Number of IoU thresholds in the 0.50:0.05:0.95 sweep.
pub const N_THRESHOLDS: usize = 10;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("detection {index} refers to unknown image {image_id}")]
    BrokenReference { index: usize, image_id: u64 },
    #[error("mask dimensions {a:?} and {b:?} differ within image {image_id}")]
    DimensionMismatch { image_id: u64, a: (u32, u32), b: (u32, u32) },
    #[error("annotation {annotation_id}: {source}")]
    GroundTruth { annotation_id: u64, source: MaskError },
    #[error("detection {index}: {source}")]
    Detection { index: usize, source: MaskError },
    #[error(transparent)]
    Coco(#[from] CocoError),
}

#[derive(Debug, Clone)]
pub struct GtInstance {
    pub image_id: u64,
    pub category_id: u64,
    pub iscrowd: bool,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone)]
pub struct DetInstance {
    pub image_id: u64,
    pub category_id: u64,
    pub score: f64,
    pub mask: BinaryMask,
}

/// `0.50, 0.55, …, 0.95`, each computed as an exact decimal quotient.
pub fn thresholds() -> [f64; N_THRESHOLDS] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Area plus tight pixel extent `[x0, y0, x1, y1)` for quick intersection.
struct Footprint {
    area: u64,
    extent: Option<(u32, u32, u32, u32)>,
}

fn footprint(m: &BinaryMask) -> Footprint {
    Footprint {
        area: m.area(),
        extent: mask::mask_bbox(m).map(|b| (b.x_min as u32, b.y_min as u32, b.x_max as u32, b.y_max as u32)),
    }
}

fn iou(a: &BinaryMask, fa: &Footprint, b: &BinaryMask, fb: &Footprint) -> f64 {
    let (Some(ea), Some(eb)) = (fa.extent, fb.extent) else {
        return 0.0;
    };
    let (x0, y0) = (ea.0.max(eb.0), ea.1.max(eb.1));
    let (x1, y1) = (ea.2.min(eb.2), ea.3.min(eb.3));
    if x0 >= x1 || y0 >= y1 {
        return 0.0;
    }
    let mut inter = 0u64;
    for y in y0..y1 {
        let ra = &a.row(y)[x0 as usize..x1 as usize];
        let rb = &b.row(y)[x0 as usize..x1 as usize];
        inter += ra.iter().zip(rb).filter(|(p, q)| **p & **q != 0).count() as u64;
    }
    let union = fa.area + fb.area - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// IoU for every (detection, ground truth) pair that shares image and category;
/// other pairs are 0.
fn iou_table(gts: &[GtInstance], dets: &[DetInstance]) -> Result<Vec<Vec<f64>>, MetricsError> {
    let gf: Vec<Footprint> = gts.iter().map(|g| footprint(&g.mask)).collect();
    let mut table = Vec::with_capacity(dets.len());
    for d in dets {
        let df = footprint(&d.mask);
        let mut row = vec![0.0; gts.len()];
        for (j, g) in gts.iter().enumerate() {
            if g.image_id != d.image_id || g.category_id != d.category_id {
                continue;
            }
            if g.mask.dims() != d.mask.dims() {
                return Err(MetricsError::DimensionMismatch { image_id: d.image_id, a: g.mask.dims(), b: d.mask.dims() });
            }
            row[j] = iou(&d.mask, &df, &g.mask, &gf[j]);
        }
        table.push(row);
    }
    Ok(table)
}

/// Detection indices by descending score, ties by index.
fn score_order(dets: &[DetInstance]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score).then(i.cmp(&j)));
    order
}

fn greedy(gts: &[GtInstance], ious: &[Vec<f64>], order: &[usize], t: f64) -> Vec<(usize, Option<usize>)> {
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(order.len());
    for &di in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if g.iscrowd || taken[j] {
                continue;
            }
            let v = ious[di][j];
            if v >= t && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        let matched = match best {
            Some((j, _)) => {
                taken[j] = true;
                Some(j)
            }
            // crowd regions absorb any number of detections
            None => gts
                .iter()
                .enumerate()
                .filter(|(j, g)| g.iscrowd && ious[di][*j] >= t)
                .max_by(|a, b| ious[di][a.0].total_cmp(&ious[di][b.0]).then(b.0.cmp(&a.0)))
                .map(|(j, _)| j),
        };
        out.push((di, matched));
    }
    out
}

/// Greedy matching in score order. Each returned pair is `(detection index,
/// matched ground-truth index)`; a crowd ground truth may appear many times.
pub fn match_at_threshold(
    gts: &[GtInstance],
    dets: &[DetInstance],
    iou_threshold: f64,
) -> Result<Vec<(usize, Option<usize>)>, MetricsError> {
    let ious = iou_table(gts, dets)?;
    Ok(greedy(gts, &ious, &score_order(dets), iou_threshold))
}

/// 101-point interpolated AP from matches listed in score order.
fn ap_from_matches(gts: &[GtInstance], matches: &[(usize, Option<usize>)]) -> f64 {
    let npos = gts.iter().filter(|g| !g.iscrowd).count();
    if npos == 0 {
        return 0.0;
    }
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, m) in matches {
        match m {
            Some(j) if gts[j].iscrowd => continue,
            Some(_) => tp += 1,
            None => fp += 1,
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let target = r as f64 / 100.0;
        let k = recall.partition_point(|&v| v < target);
        if k < precision.len() {
            sum += precision[k];
        }
    }
    sum / 101.0
}

pub fn ap_at_threshold(gts: &[GtInstance], dets: &[DetInstance], iou_threshold: f64) -> Result<f64, MetricsError> {
    Ok(ap_from_matches(gts, &match_at_threshold(gts, dets, iou_threshold)?))
}

/// Per-threshold APs for the whole sweep, sharing one IoU table.
pub fn ap_sweep(gts: &[GtInstance], dets: &[DetInstance]) -> Result<[f64; N_THRESHOLDS], MetricsError> {
    let ious = iou_table(gts, dets)?;
    let order = score_order(dets);
    Ok(thresholds().map(|t| ap_from_matches(gts, &greedy(gts, &ious, &order, t))))
}

/// AP averaged over 0.50:0.05:0.95.
pub fn ap_range(gts: &[GtInstance], dets: &[DetInstance]) -> Result<f64, MetricsError> {
    Ok(mean(&ap_sweep(gts, dets)?))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub thresholds: Vec<f64>,
    /// AP@[.50:.95] per category id.
    pub per_category_ap: BTreeMap<u64, f64>,
    /// Per category, one AP for each entry of `thresholds`.
    pub per_threshold_ap: BTreeMap<u64, Vec<f64>>,
    pub category_names: BTreeMap<u64, String>,
    pub map_overall: f64,
}

impl EvalResult {
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<16} {:>7}", "category", "AP");
        for t in &self.thresholds {
            let _ = write!(s, " {:>6}", format!("@{:.2}", t));
        }
        s.push('\n');
        for (cat, ap) in &self.per_category_ap {
            let name = self.category_names.get(cat).cloned().unwrap_or_else(|| cat.to_string());
            let _ = write!(s, "{:<16} {:>7.3}", name, ap);
            for v in &self.per_threshold_ap[cat] {
                let _ = write!(s, " {:>6.3}", v);
            }
            s.push('\n');
        }
        let _ = writeln!(s, "{:<16} {:>7.3}", "mAP", self.map_overall);
        s
    }
}

/// Scores a results list against a ground-truth document. Categories without
/// any non-crowd ground truth are left out of the mean.
pub fn evaluate(gt_doc: &DatasetDoc, results: &[Detection]) -> Result<EvalResult, MetricsError> {
    let dims: HashMap<u64, (u32, u32)> = gt_doc.images.iter().map(|im| (im.id, (im.width, im.height))).collect();
    let mut gts_by_cat: BTreeMap<u64, Vec<GtInstance>> = BTreeMap::new();
    for a in &gt_doc.annotations {
        let (w, h) = dims[&a.image_id];
        let mask = a
            .segmentation
            .to_mask(w, h)
            .map_err(|source| MetricsError::GroundTruth { annotation_id: a.id, source })?;
        gts_by_cat.entry(a.category_id).or_default().push(GtInstance {
            image_id: a.image_id,
            category_id: a.category_id,
            iscrowd: a.iscrowd,
            mask,
        });
    }
    let mut dets_by_cat: BTreeMap<u64, Vec<DetInstance>> = BTreeMap::new();
    for (index, d) in results.iter().enumerate() {
        let Some(&(w, h)) = dims.get(&d.image_id) else {
            return Err(MetricsError::BrokenReference { index, image_id: d.image_id });
        };
        if !gts_by_cat.contains_key(&d.category_id) {
            continue;
        }
        let mask = mask::rle_decode(&d.segmentation).map_err(|source| MetricsError::Detection { index, source })?;
        if mask.dims() != (w, h) {
            return Err(MetricsError::DimensionMismatch { image_id: d.image_id, a: (w, h), b: mask.dims() });
        }
        dets_by_cat.entry(d.category_id).or_default().push(DetInstance {
            image_id: d.image_id,
            category_id: d.category_id,
            score: d.score,
            mask,
        });
    }

    let mut per_category_ap = BTreeMap::new();
    let mut per_threshold_ap = BTreeMap::new();
    for (cat, gts) in &gts_by_cat {
        if gts.iter().all(|g| g.iscrowd) {
            continue;
        }
        let dets = dets_by_cat.remove(cat).unwrap_or_default();
        let sweep = ap_sweep(gts, &dets)?;
        per_category_ap.insert(*cat, mean(&sweep));
        per_threshold_ap.insert(*cat, sweep.to_vec());
    }
    let map_overall = mean(&per_category_ap.values().copied().collect::<Vec<_>>());
    Ok(EvalResult {
        thresholds: thresholds().to_vec(),
        per_category_ap,
        per_threshold_ap,
        category_names: gt_doc.categories.iter().map(|c| (c.id, c.name.clone())).collect(),
        map_overall,
    })
}
