//! Pixel-level mask algebra.
//!
//! Masks are dense, row-major, one byte per pixel (0 or 1). The run-length
//! form follows the COCO uncompressed convention: pixels are scanned in
//! column-major order (down each column, then left to right) and `counts`
//! alternates background/foreground runs, always starting with background
//! (so a mask whose first pixel is foreground starts with a `0` run).
//!
//! Rasterization samples pixel centers: pixel `(row i, col j)` is set iff the
//! point `(j + 0.5, i + 0.5)` lies inside a shape. Polygons use the even-odd
//! rule, with the half-open crossing test `(y0 > py) != (y1 > py)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("polygon {index} has {vertices} vertices, need at least 3")]
    DegeneratePolygon { index: usize, vertices: usize },
    #[error("rle counts sum to {actual}, expected {expected}")]
    LengthMismatch { expected: u64, actual: u64 },
    #[error("mask dimensions differ: {a:?} vs {b:?}")]
    DimensionMismatch { a: (u32, u32), b: (u32, u32) },
    #[error("patch lies entirely outside the canvas")]
    EmptyAfterClip,
}

/// Axis-aligned box in pixel-boundary coordinates (`x_max` is one past the last column).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Box {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    /// From COCO `[x, y, w, h]`.
    pub fn from_xywh(b: [f64; 4]) -> Self {
        Self::new(b[0], b[1], b[0] + b[2], b[1] + b[3])
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }
}

pub fn box_iou(a: &Box, b: &Box) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Uncompressed COCO RLE. `size` is `[height, width]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub size: [u32; 2],
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn height(&self) -> u32 {
        self.size[0]
    }

    pub fn width(&self) -> u32 {
        self.size[1]
    }

    /// Foreground pixel count (sum of odd-indexed runs).
    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("area", &self.area())
            .finish()
    }
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; width as usize * height as usize],
        }
    }

    /// Builds a mask from row-major values; any nonzero byte is foreground.
    pub fn from_row_major(width: u32, height: u32, values: &[u8]) -> Result<Self, MaskError> {
        let expected = width as u64 * height as u64;
        if values.len() as u64 != expected {
            return Err(MaskError::LengthMismatch {
                expected,
                actual: values.len() as u64,
            });
        }
        Ok(Self {
            width,
            height,
            data: values.iter().map(|&v| (v != 0) as u8).collect(),
        })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    #[inline]
    fn idx(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[self.idx(x, y)] != 0
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let i = self.idx(x, y);
        self.data[i] = value as u8;
    }

    /// Row-major 0/1 bytes.
    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn row(&self, y: u32) -> &[u8] {
        let start = y as usize * self.width as usize;
        &self.data[start..start + self.width as usize]
    }

    pub fn area(&self) -> u64 {
        self.data.iter().map(|&v| v as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        !any_set(&self.data)
    }

    /// Copies the `[x, x+w) × [y, y+h)` window into a new mask. The window must lie inside.
    pub fn crop(&self, x: u32, y: u32, w: u32, h: u32) -> BinaryMask {
        assert!(x + w <= self.width && y + h <= self.height, "crop window out of bounds");
        let mut out = BinaryMask::new(w, h);
        for row in 0..h {
            let src = &self.row(y + row)[x as usize..(x + w) as usize];
            let start = row as usize * w as usize;
            out.data[start..start + w as usize].copy_from_slice(src);
        }
        out
    }

    pub fn union_with(&mut self, other: &BinaryMask) -> Result<(), MaskError> {
        check_dims(self, other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
        Ok(())
    }

    pub fn subtract(&mut self, other: &BinaryMask) -> Result<(), MaskError> {
        check_dims(self, other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a &= !b & 1;
        }
        Ok(())
    }
}

/// True if any byte is nonzero. Works in 64-byte blocks so the OR vectorizes.
fn any_set(data: &[u8]) -> bool {
    let mut blocks = data.chunks_exact(64);
    for block in blocks.by_ref() {
        let acc = block
            .chunks_exact(8)
            .fold(0u64, |a, c| a | u64::from_ne_bytes(c.try_into().unwrap()));
        if acc != 0 {
            return true;
        }
    }
    blocks.remainder().iter().any(|&v| v != 0)
}

fn check_dims(a: &BinaryMask, b: &BinaryMask) -> Result<(), MaskError> {
    if a.dims() != b.dims() {
        return Err(MaskError::DimensionMismatch { a: a.dims(), b: b.dims() });
    }
    Ok(())
}

/// A closed polygon as a list of `(x, y)` vertices.
pub type Polygon = Vec<(f64, f64)>;

/// Converts a COCO flat coordinate list `[x0, y0, x1, y1, ...]` to vertices.
pub fn polygon_from_flat(flat: &[f64]) -> Polygon {
    flat.chunks_exact(2).map(|c| (c[0], c[1])).collect()
}

/// Rasterizes the union of `polys`, each filled with the even-odd rule.
pub fn rasterize_polygons(polys: &[Polygon], width: u32, height: u32) -> Result<BinaryMask, MaskError> {
    for (index, p) in polys.iter().enumerate() {
        if p.len() < 3 {
            return Err(MaskError::DegeneratePolygon { index, vertices: p.len() });
        }
    }
    let mut mask = BinaryMask::new(width, height);
    let mut crossings: Vec<f64> = Vec::new();
    for poly in polys {
        let (lo, hi) = poly
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, y)| (lo.min(y), hi.max(y)));
        let row_start = (lo - 0.5).floor().max(0.0) as u32;
        let row_end = ((hi - 0.5).ceil() + 1.0).clamp(0.0, height as f64) as u32;
        for row in row_start..row_end {
            let py = row as f64 + 0.5;
            crossings.clear();
            let n = poly.len();
            for k in 0..n {
                let (x0, y0) = poly[k];
                let (x1, y1) = poly[(k + n - 1) % n];
                if (y0 > py) != (y1 > py) {
                    crossings.push((x1 - x0) * (py - y0) / (y1 - y0) + x0);
                }
            }
            if crossings.is_empty() {
                continue;
            }
            crossings.sort_by(f64::total_cmp);
            // A center px is inside iff an odd number of crossings lie strictly right of it.
            let mut right = crossings.len();
            let mut first = 0;
            for col in 0..width {
                let px = col as f64 + 0.5;
                while first < crossings.len() && crossings[first] <= px {
                    first += 1;
                    right -= 1;
                }
                if right % 2 == 1 {
                    mask.set(col, row, true);
                }
            }
        }
    }
    Ok(mask)
}

/// Rasterizes an axis-aligned ellipse: center inside iff `((x-cx)/rx)² + ((y-cy)/ry)² <= 1`.
pub fn rasterize_ellipse(cx: f64, cy: f64, rx: f64, ry: f64, width: u32, height: u32) -> BinaryMask {
    let mut mask = BinaryMask::new(width, height);
    if rx <= 0.0 || ry <= 0.0 {
        return mask;
    }
    let x0 = (cx - rx - 1.0).floor().max(0.0) as u32;
    let x1 = (cx + rx + 1.0).ceil().clamp(0.0, width as f64) as u32;
    let y0 = (cy - ry - 1.0).floor().max(0.0) as u32;
    let y1 = (cy + ry + 1.0).ceil().clamp(0.0, height as f64) as u32;
    for y in y0..y1 {
        let dy = (y as f64 + 0.5 - cy) / ry;
        for x in x0..x1 {
            let dx = (x as f64 + 0.5 - cx) / rx;
            if dx * dx + dy * dy <= 1.0 {
                mask.set(x, y, true);
            }
        }
    }
    mask
}

pub fn rle_encode(mask: &BinaryMask) -> Rle {
    let (w, h) = (mask.width, mask.height);
    let size = [h, w];
    let Some(b) = mask_bbox(mask) else {
        return Rle { size, counts: vec![w * h] };
    };
    let (x0, y0, x1, y1) = (b.x_min as u32, b.y_min as u32, b.x_max as u32, b.y_max as u32);
    // everything outside the box is background, so only box columns are scanned
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = x0 * h;
    for x in x0..x1 {
        run += y0;
        if current != 0 && y0 > 0 {
            counts.push(run - y0);
            run = y0;
            current = 0;
        }
        for y in y0..y1 {
            let v = mask.data[mask.idx(x, y)];
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
        if h > y1 {
            if current != 0 {
                counts.push(run);
                run = 0;
                current = 0;
            }
            run += h - y1;
        }
    }
    if current != 0 && x1 < w {
        counts.push(run);
        run = 0;
    }
    run += (w - x1) * h;
    counts.push(run);
    Rle { size, counts }
}

pub fn rle_decode(rle: &Rle) -> Result<BinaryMask, MaskError> {
    let (width, height) = (rle.width(), rle.height());
    let expected = width as u64 * height as u64;
    let actual: u64 = rle.counts.iter().map(|&c| c as u64).sum();
    if actual != expected {
        return Err(MaskError::LengthMismatch { expected, actual });
    }
    let mut mask = BinaryMask::new(width, height);
    let mut pos = 0u64;
    for (i, &c) in rle.counts.iter().enumerate() {
        if i % 2 == 1 && c > 0 {
            let (mut x, mut y) = ((pos / height as u64) as u32, (pos % height as u64) as u32);
            for _ in 0..c {
                let at = mask.idx(x, y);
                mask.data[at] = 1;
                y += 1;
                if y == height {
                    y = 0;
                    x += 1;
                }
            }
        }
        pos += c as u64;
    }
    Ok(mask)
}

/// Tightest pixel-boundary box around the foreground, `None` for an empty mask.
pub fn mask_bbox(mask: &BinaryMask) -> Option<Box> {
    let y_min = (0..mask.height).find(|&y| any_set(mask.row(y)))?;
    let y_max = (y_min..mask.height).rev().find(|&y| any_set(mask.row(y)))? + 1;
    let mut x_min = mask.width as usize;
    let mut x_max = 0;
    // Once a column range is known, only the margins outside it can widen it.
    for y in y_min..y_max {
        let row = mask.row(y);
        if let Some(first) = row[..x_min].iter().position(|&v| v != 0) {
            x_min = first;
        }
        let tail = x_max.max(x_min);
        if let Some(last) = row[tail..].iter().rposition(|&v| v != 0) {
            x_max = tail + last + 1;
        }
    }
    Some(Box::new(x_min as f64, y_min as f64, x_max as f64, y_max as f64))
}

pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MaskError> {
    check_dims(a, b)?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &q) in a.data.iter().zip(&b.data) {
        inter += (p & q) as u64;
        union += (p | q) as u64;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone)]
pub struct PasteOutcome {
    /// Input canvas masks with the pasted region subtracted; removed entries are kept (empty).
    pub canvas_masks: Vec<BinaryMask>,
    /// The patch mask placed on a canvas-sized mask.
    pub pasted_mask: BinaryMask,
    /// Indices into `canvas_masks` whose remaining area is zero.
    pub removed_indices: Vec<usize>,
}

/// Places `patch_mask` with its top-left corner at `position` on a `width × height`
/// canvas. The pasted object is topmost: its pixels are removed from every canvas mask.
pub fn composite_paste(
    width: u32,
    height: u32,
    canvas_masks: &[BinaryMask],
    patch_mask: &BinaryMask,
    position: (i64, i64),
) -> Result<PasteOutcome, MaskError> {
    let mut out = canvas_masks.to_vec();
    let (pasted_mask, removed_indices) = composite_paste_in_place(width, height, &mut out, patch_mask, position)?;
    Ok(PasteOutcome {
        canvas_masks: out,
        pasted_mask,
        removed_indices,
    })
}

/// [`composite_paste`] updating `canvas_masks` in place. On error the masks are untouched.
pub fn composite_paste_in_place(
    width: u32,
    height: u32,
    canvas_masks: &mut [BinaryMask],
    patch_mask: &BinaryMask,
    position: (i64, i64),
) -> Result<(BinaryMask, Vec<usize>), MaskError> {
    for m in canvas_masks.iter() {
        if m.dims() != (width, height) {
            return Err(MaskError::DimensionMismatch { a: m.dims(), b: (width, height) });
        }
    }
    let pasted_mask = place_patch(width, height, patch_mask, position);
    let clip = |v: i64, hi: u32| v.clamp(0, hi as i64) as u32;
    let (rx0, ry0) = (clip(position.0, width), clip(position.1, height));
    let (rx1, ry1) = (
        clip(position.0 + patch_mask.width as i64, width),
        clip(position.1 + patch_mask.height as i64, height),
    );
    if !(ry0..ry1).any(|y| pasted_mask.row(y)[rx0 as usize..rx1 as usize].iter().any(|&v| v != 0)) {
        return Err(MaskError::EmptyAfterClip);
    }
    let mut removed_indices = Vec::new();
    let (c0, c1) = (rx0 as usize, rx1 as usize);
    for (i, m) in canvas_masks.iter_mut().enumerate() {
        let mut cleared = false;
        let mut left_in_region = false;
        for y in ry0..ry1 {
            let start = y as usize * width as usize;
            let src = &pasted_mask.data[start + c0..start + c1];
            for (d, &p) in m.data[start + c0..start + c1].iter_mut().zip(src) {
                cleared |= *d & p != 0;
                *d &= !p & 1;
                left_in_region |= *d != 0;
            }
        }
        // Only a mask that lost pixels can have become empty.
        if cleared && !left_in_region && m.is_empty() {
            removed_indices.push(i);
        }
    }
    Ok((pasted_mask, removed_indices))
}

/// Translates `patch` onto an empty `width × height` canvas, clipping what falls outside.
pub fn place_patch(width: u32, height: u32, patch: &BinaryMask, position: (i64, i64)) -> BinaryMask {
    let mut out = BinaryMask::new(width, height);
    let (px, py) = position;
    for sy in 0..patch.height {
        let y = py + sy as i64;
        if y < 0 || y >= height as i64 {
            continue;
        }
        for sx in 0..patch.width {
            let x = px + sx as i64;
            if x < 0 || x >= width as i64 {
                continue;
            }
            if patch.get(sx, sy) {
                out.set(x as u32, y as u32, true);
            }
        }
    }
    out
}
