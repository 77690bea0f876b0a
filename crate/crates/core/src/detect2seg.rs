//! Detection-to-segmentation bridge: score thresholding, box format
//! conversion, box rasterization and box-prompted segmenters.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pgm::{GrayImage, PgmError};

/// Default confidence threshold applied to detections.
pub const DEFAULT_TAU: f64 = 0.3;

#[derive(Debug, Error)]
pub enum BoxError {
    #[error("box width and height must be positive, got w={w} h={h}")]
    Degenerate { w: f64, h: f64 },
    #[error("normalized coordinate {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("mask dimensions {got:?} differ from expected {expected:?}")]
    DimMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error(transparent)]
    Pgm(#[from] PgmError),
}

/// Axis-aligned box in absolute pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
    pub label: String,
}

impl BBox {
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x2 > self.x1 && self.y2 > self.y1 && (0.0..=1.0).contains(&self.score)
    }

    pub fn clamp_to(&mut self, width: usize, height: usize) {
        let (w, h) = (width as f64, height as f64);
        self.x1 = self.x1.clamp(0.0, w);
        self.x2 = self.x2.clamp(0.0, w);
        self.y1 = self.y1.clamp(0.0, h);
        self.y2 = self.y2.clamp(0.0, h);
    }
}

/// Scored boxes predicted for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub case_id: String,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<BBox>,
}

impl DetectionSet {
    pub fn empty(case_id: impl Into<String>, width: usize, height: usize) -> Self {
        Self {
            case_id: case_id.into(),
            width,
            height,
            boxes: Vec::new(),
        }
    }
}

/// Keeps exactly the boxes with `score >= tau`, in input order.
pub fn threshold_boxes(dets: &DetectionSet, tau: f64) -> DetectionSet {
    DetectionSet {
        boxes: dets.boxes.iter().filter(|b| b.score >= tau).cloned().collect(),
        ..dets.clone()
    }
}

/// Normalized `(cx, cy, w, h)` to absolute `(x1, y1, x2, y2)`, clamped to
/// the image.
pub fn yolo_to_xyxy(cx: f64, cy: f64, w: f64, h: f64, width: usize, height: usize) -> Result<[f64; 4], BoxError> {
    if !(w > 0.0 && h > 0.0) {
        return Err(BoxError::Degenerate { w, h });
    }
    for v in [cx, cy, w, h] {
        if !(0.0..=1.0).contains(&v) {
            return Err(BoxError::OutOfRange(v));
        }
    }
    let (fw, fh) = (width as f64, height as f64);
    Ok([
        ((cx - w / 2.0) * fw).clamp(0.0, fw),
        ((cy - h / 2.0) * fh).clamp(0.0, fh),
        ((cx + w / 2.0) * fw).clamp(0.0, fw),
        ((cy + h / 2.0) * fh).clamp(0.0, fh),
    ])
}

/// Absolute `(x1, y1, x2, y2)` to normalized `(cx, cy, w, h)`.
pub fn xyxy_to_yolo(x1: f64, y1: f64, x2: f64, y2: f64, width: usize, height: usize) -> [f64; 4] {
    let (fw, fh) = (width as f64, height as f64);
    [
        (x1 + x2) / 2.0 / fw,
        (y1 + y2) / 2.0 / fh,
        (x2 - x1) / fw,
        (y2 - y1) / fh,
    ]
}

/// Parses per-image YOLO text: one `class cx cy w h [score]` per line.
/// Class ids index into `class_names`; a missing score reads as 1.0.
pub fn parse_yolo_txt(text: &str, width: usize, height: usize, class_names: &[&str]) -> Result<Vec<BBox>, BoxError> {
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| BoxError::Parse { line: line_no, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if !(5..=6).contains(&fields.len()) {
            return Err(err(format!("expected 5 or 6 fields, found {}", fields.len())));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("bad class id `{}`", fields[0])))?;
        let label = class_names
            .get(class_id)
            .ok_or_else(|| err(format!("class id {class_id} has no name")))?;
        let mut nums = [0.0; 5];
        nums[4] = 1.0;
        for (slot, f) in nums.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| err(format!("bad number `{f}`")))?;
        }
        let [x1, y1, x2, y2] =
            yolo_to_xyxy(nums[0], nums[1], nums[2], nums[3], width, height).map_err(|e| err(e.to_string()))?;
        boxes.push(BBox {
            x1,
            y1,
            x2,
            y2,
            score: nums[4],
            label: label.to_string(),
        });
    }
    Ok(boxes)
}

/// Binary raster, row-major, `true` = foreground.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Fills the half-open pixel range `[round(x1), round(x2)) ×
    /// [round(y1), round(y2))`, clipped to the raster.
    pub fn from_box(width: usize, height: usize, b: &BBox) -> Self {
        let mut m = Self::empty(width, height);
        let span = |lo: f64, hi: f64, n: usize| {
            let lo = lo.round().clamp(0.0, n as f64) as usize;
            let hi = hi.round().clamp(0.0, n as f64) as usize;
            lo..hi.max(lo)
        };
        let xs = span(b.x1, b.x2, width);
        for y in span(b.y1, b.y2, height) {
            for x in xs.clone() {
                m.bits[y * width + x] = true;
            }
        }
        m
    }

    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| !b).collect(),
            ..self.clone()
        }
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        }
    }

    /// Pixels at or above 128 are foreground.
    pub fn from_image(img: &GrayImage) -> Self {
        Self {
            width: img.width,
            height: img.height,
            bits: img.pixels.iter().map(|&p| p >= 128).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), MaskError> {
        Ok(self.to_image().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, MaskError> {
        Ok(Self::from_image(&GrayImage::load(path)?))
    }
}

/// Pixelwise OR. An empty list yields an all-zero mask of the given size.
pub fn merge_masks(masks: &[Mask], width: usize, height: usize) -> Result<Mask, MaskError> {
    let mut out = Mask::empty(width, height);
    for m in masks {
        if m.dims() != out.dims() {
            return Err(MaskError::DimMismatch {
                expected: out.dims(),
                got: m.dims(),
            });
        }
        for (o, &b) in out.bits.iter_mut().zip(&m.bits) {
            *o |= b;
        }
    }
    Ok(out)
}

/// `<dir>/<case_id>__<box_index>.pgm`
pub fn box_mask_path(dir: &Path, case_id: &str, box_index: usize) -> PathBuf {
    dir.join(format!("{case_id}__{box_index}.pgm"))
}

/// `<dir>/<case_id>.pgm`
pub fn merged_mask_path(dir: &Path, case_id: &str) -> PathBuf {
    dir.join(format!("{case_id}.pgm"))
}

/// Produces one mask from a box prompt.
pub trait Segmenter: Sync {
    fn segment(
        &self,
        case_id: &str,
        width: usize,
        height: usize,
        box_index: usize,
        bbox: &BBox,
    ) -> Result<Mask, MaskError>;
}

/// Mask = box interior.
#[derive(Clone, Copy, Debug, Default)]
pub struct BoxFill;

impl Segmenter for BoxFill {
    fn segment(&self, _: &str, width: usize, height: usize, _: usize, bbox: &BBox) -> Result<Mask, MaskError> {
        Ok(Mask::from_box(width, height, bbox))
    }
}

/// Reads precomputed per-box masks, e.g. from an external promptable
/// segmenter, named as [`box_mask_path`].
#[derive(Clone, Debug)]
pub struct ExternalMasks {
    pub dir: PathBuf,
}

impl Segmenter for ExternalMasks {
    fn segment(
        &self,
        case_id: &str,
        width: usize,
        height: usize,
        box_index: usize,
        _: &BBox,
    ) -> Result<Mask, MaskError> {
        let m = Mask::load(&box_mask_path(&self.dir, case_id, box_index))?;
        if m.dims() != (width, height) {
            return Err(MaskError::DimMismatch {
                expected: (width, height),
                got: m.dims(),
            });
        }
        Ok(m)
    }
}

#[derive(Debug)]
pub struct BoxFailure {
    pub box_index: usize,
    pub error: MaskError,
}

#[derive(Debug, Default)]
pub struct Segmentation {
    /// `(box_index, mask)` for every box the segmenter handled.
    pub masks: Vec<(usize, Mask)>,
    pub failures: Vec<BoxFailure>,
}

impl Segmentation {
    pub fn merged(&self, width: usize, height: usize) -> Result<Mask, MaskError> {
        let masks: Vec<Mask> = self.masks.iter().map(|(_, m)| m.clone()).collect();
        merge_masks(&masks, width, height)
    }
}

/// Runs the segmenter on each (already thresholded) box. A failing box is
/// recorded and the rest still run.
pub fn segment_from_boxes(dets: &DetectionSet, segmenter: &dyn Segmenter) -> Segmentation {
    let mut out = Segmentation::default();
    for (i, b) in dets.boxes.iter().enumerate() {
        match segmenter.segment(&dets.case_id, dets.width, dets.height, i, b) {
            Ok(m) => out.masks.push((i, m)),
            Err(error) => out.failures.push(BoxFailure { box_index: i, error }),
        }
    }
    out
}
