//! Axis-aligned boxes, IOU, per-label non-maximum suppression and the
//! patch grid that masking operates on.
//!
//! Coordinates are continuous with the origin at the top-left corner of the
//! image. A pixel `(x, y)` covers the unit square `[x, x+1) x [y, y+1)`.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid box [{0}, {1}, {2}, {3}]: coordinates must be finite, non-negative and span a positive area")]
    InvalidBox(f64, f64, f64, f64),
    #[error("detection score {0} is outside [0, 1]")]
    InvalidScore(f64),
    #[error("threshold {0} is outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("image {width}x{height} is not tiled by {patch_size}-pixel patches")]
    InvalidGrid {
        width: u32,
        height: u32,
        patch_size: u32,
    },
    #[error("box {bbox} lies outside the {width}x{height} image")]
    OutOfBounds { bbox: BBox, width: u32, height: u32 },
    #[error("patch index {index} is outside a grid of {count} patches")]
    PatchOutOfRange { index: usize, count: usize },
}

/// An axis-aligned box with strictly positive area.
///
/// Serialized as `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !finite || x_min < 0.0 || y_min < 0.0 || x_min >= x_max || y_min >= y_max {
            return Err(GeometryError::InvalidBox(x_min, y_min, x_max, y_max));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Box from its center and extent.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    /// Area of the overlap with `other`; zero when the boxes only touch.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.intersection_area(other) > 0.0
    }

    /// True when `other` lies entirely inside `self` (boundaries inclusive).
    pub fn contains(&self, other: &BBox) -> bool {
        other.x_min >= self.x_min
            && other.y_min >= self.y_min
            && other.x_max <= self.x_max
            && other.y_max <= self.y_max
    }

    pub fn within_image(&self, width: u32, height: u32) -> bool {
        self.x_max <= f64::from(width) && self.y_max <= f64::from(height)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self, GeometryError> {
        Self::new(
            self.x_min + dx,
            self.y_min + dy,
            self.x_max + dx,
            self.y_max + dy,
        )
    }

    /// Box from raw coordinates clipped to `[0, width] x [0, height]`; `None`
    /// if non-finite or nothing is left. Coordinates may start out negative.
    pub fn clipped(x_min: f64, y_min: f64, x_max: f64, y_max: f64, width: u32, height: u32) -> Option<Self> {
        let (w, h) = (f64::from(width), f64::from(height));
        Self::new(
            x_min.clamp(0.0, w),
            y_min.clamp(0.0, h),
            x_max.clamp(0.0, w),
            y_max.clamp(0.0, h),
        )
        .ok()
    }

    /// Intersection with `[0, width) x [0, height)`, or `None` if nothing is left.
    pub fn clamp_to(&self, width: u32, height: u32) -> Option<Self> {
        let (w, h) = (f64::from(width), f64::from(height));
        Self::new(
            self.x_min.clamp(0.0, w),
            self.y_min.clamp(0.0, h),
            self.x_max.clamp(0.0, w),
            self.y_max.clamp(0.0, h),
        )
        .ok()
    }

    /// Coordinates rounded to the nearest pixel boundary. Returns `None` if
    /// the rounded box collapses.
    pub fn snap_to_pixels(&self) -> Option<Self> {
        Self::new(
            self.x_min.round(),
            self.y_min.round(),
            self.x_max.round(),
            self.y_max.round(),
        )
        .ok()
    }

    /// Integer pixel ranges `[x0, x1) x [y0, y1)` whose pixel centers lie in the box.
    pub fn pixel_span(&self) -> (u32, u32, u32, u32) {
        let lo = |v: f64| (v - 0.5).ceil().max(0.0) as u32;
        (
            lo(self.x_min),
            lo(self.y_min),
            lo(self.x_max),
            lo(self.y_max),
        )
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.x_min, self.y_min, self.x_max, self.y_max
        )
    }
}

/// Name of a part ("word") in a grammar vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Label(String);

impl Label {
    pub fn new(name: impl Into<String>) -> Self {
        Label(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for Label {
    fn from(s: &str) -> Self {
        Label(s.to_owned())
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A labelled box with a confidence score in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDetection")]
pub struct Detection {
    pub label: Label,
    #[serde(rename = "box")]
    pub bbox: BBox,
    score: f64,
}

#[derive(Deserialize)]
struct RawDetection {
    label: Label,
    #[serde(rename = "box")]
    bbox: BBox,
    score: f64,
}

impl TryFrom<RawDetection> for Detection {
    type Error = GeometryError;

    fn try_from(raw: RawDetection) -> Result<Self, Self::Error> {
        Detection::new(raw.label, raw.bbox, raw.score)
    }
}

impl Detection {
    pub fn new(label: impl Into<Label>, bbox: BBox, score: f64) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(GeometryError::InvalidScore(score));
        }
        Ok(Self {
            label: label.into(),
            bbox,
            score,
        })
    }

    /// A ground-truth detection (score 1.0).
    pub fn certain(label: impl Into<Label>, bbox: BBox) -> Self {
        Self {
            label: label.into(),
            bbox,
            score: 1.0,
        }
    }

    pub fn score(&self) -> f64 {
        self.score
    }
}

impl From<String> for Label {
    fn from(s: String) -> Self {
        Label(s)
    }
}

/// Intersection over union. Symmetric, in `[0, 1]`, exactly 1 for identical boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

fn check_ratio(t: f64) -> Result<(), GeometryError> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(GeometryError::InvalidThreshold(t))
    }
}

/// Descending score; ties broken by `(label, x_min, y_min)` ascending.
pub(crate) fn score_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.label.cmp(&b.label))
        .then_with(|| a.bbox.x_min.total_cmp(&b.bbox.x_min))
        .then_with(|| a.bbox.y_min.total_cmp(&b.bbox.y_min))
}

/// Greedy non-maximum suppression within each label.
///
/// A detection is dropped when its IOU with an already kept detection of the
/// same label exceeds `threshold`. Output is in descending score order.
pub fn nms(detections: &[Detection], threshold: f64) -> Result<Vec<Detection>, GeometryError> {
    check_ratio(threshold)?;
    let mut sorted: Vec<&Detection> = detections.iter().collect();
    sorted.sort_by(|a, b| score_order(a, b));

    let mut kept: Vec<Detection> = Vec::with_capacity(sorted.len());
    for det in sorted {
        let suppressed = kept
            .iter()
            .any(|k| k.label == det.label && iou(&k.bbox, &det.bbox) > threshold);
        if !suppressed {
            kept.push(det.clone());
        }
    }
    Ok(kept)
}

/// Regular tiling of an image into square, non-overlapping patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    image_width: u32,
    image_height: u32,
    patch_size: u32,
}

pub const DEFAULT_PATCH_SIZE: u32 = 16;

impl PatchGrid {
    pub fn new(image_width: u32, image_height: u32, patch_size: u32) -> Result<Self, GeometryError> {
        let ok = patch_size > 0
            && image_width > 0
            && image_height > 0
            && image_width % patch_size == 0
            && image_height % patch_size == 0;
        if !ok {
            return Err(GeometryError::InvalidGrid {
                width: image_width,
                height: image_height,
                patch_size,
            });
        }
        Ok(Self {
            image_width,
            image_height,
            patch_size,
        })
    }

    pub fn image_width(&self) -> u32 {
        self.image_width
    }
    pub fn image_height(&self) -> u32 {
        self.image_height
    }
    pub fn patch_size(&self) -> u32 {
        self.patch_size
    }

    pub fn cols(&self) -> u32 {
        self.image_width / self.patch_size
    }

    pub fn rows(&self) -> u32 {
        self.image_height / self.patch_size
    }

    pub fn patch_count(&self) -> usize {
        (self.cols() * self.rows()) as usize
    }

    /// Row-major index of the patch at `(row, col)`.
    pub fn index(&self, row: u32, col: u32) -> usize {
        (row * self.cols() + col) as usize
    }

    /// Pixel extent of a patch as a box.
    pub fn patch_box(&self, index: usize) -> Result<BBox, GeometryError> {
        let (x0, y0) = self.patch_origin(index)?;
        let p = self.patch_size;
        BBox::new(
            f64::from(x0),
            f64::from(y0),
            f64::from(x0 + p),
            f64::from(y0 + p),
        )
    }

    /// Top-left pixel of a patch.
    pub fn patch_origin(&self, index: usize) -> Result<(u32, u32), GeometryError> {
        if index >= self.patch_count() {
            return Err(GeometryError::PatchOutOfRange {
                index,
                count: self.patch_count(),
            });
        }
        let cols = self.cols() as usize;
        let row = (index / cols) as u32;
        let col = (index % cols) as u32;
        Ok((col * self.patch_size, row * self.patch_size))
    }

    /// Patches whose open pixel extent intersects the open interior of `bbox`,
    /// in ascending row-major order.
    pub fn patches_for_box(&self, bbox: &BBox) -> Result<Vec<usize>, GeometryError> {
        if !bbox.within_image(self.image_width, self.image_height) {
            return Err(GeometryError::OutOfBounds {
                bbox: *bbox,
                width: self.image_width,
                height: self.image_height,
            });
        }
        let p = f64::from(self.patch_size);
        // patch k spans (k*p, (k+1)*p); it overlaps (lo, hi) iff k*p < hi and (k+1)*p > lo
        let span = |lo: f64, hi: f64, n: u32| {
            let first = (lo / p).floor() as u32;
            let last = ((hi / p).ceil() as u32).min(n);
            first..last
        };
        let mut out = Vec::new();
        for row in span(bbox.y_min, bbox.y_max, self.rows()) {
            for col in span(bbox.x_min, bbox.x_max, self.cols()) {
                out.push(self.index(row, col));
            }
        }
        Ok(out)
    }

    pub fn check_index(&self, index: usize) -> Result<(), GeometryError> {
        if index < self.patch_count() {
            Ok(())
        } else {
            Err(GeometryError::PatchOutOfRange {
                index,
                count: self.patch_count(),
            })
        }
    }
}
