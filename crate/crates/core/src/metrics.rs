//! Detection and segmentation figures of merit: Dice, IoU, mAP@50, mean
//! detection IoU and case-level accuracy.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::detect2seg::{BBox, DetectionSet, Mask, MaskError};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const HEALTHY: &str = "healthy";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("no cases to align")]
    EmptyAlignment,
    #[error("case `{0}` has a prediction but no ground truth")]
    UnexpectedCase(String),
    #[error("case `{0}` has ground truth but no prediction")]
    MissingPrediction(String),
    #[error("tumor case `{0}` has no ground-truth mask")]
    MissingGroundTruthMask(String),
    #[error("duplicate case `{0}`")]
    DuplicateCase(String),
}

/// Reference annotation for one case.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub case_id: String,
    pub class: String,
    /// Empty for healthy cases.
    pub boxes: Vec<BBox>,
    pub mask: Option<Mask>,
}

fn same_dims(a: &Mask, b: &Mask) -> Result<(), MaskError> {
    if a.dims() != b.dims() {
        return Err(MaskError::DimMismatch {
            expected: a.dims(),
            got: b.dims(),
        });
    }
    Ok(())
}

fn overlap_counts(a: &Mask, b: &Mask) -> (usize, usize, usize) {
    let mut inter = 0;
    let (mut na, mut nb) = (0, 0);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    (inter, na, nb)
}

/// `2|P∩G| / (|P|+|G|)`; two empty masks score 1.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64, MaskError> {
    same_dims(pred, gt)?;
    let (inter, np, ng) = overlap_counts(pred, gt);
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

/// `|A∩B| / |A∪B|`; an empty union scores 1.
pub fn iou_mask(a: &Mask, b: &Mask) -> Result<f64, MaskError> {
    same_dims(a, b)?;
    let (inter, na, nb) = overlap_counts(a, b);
    let union = na + nb - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

pub fn iou_box(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// All-point interpolated AP from detections already sorted by descending
/// score, each flagged true/false positive.
pub fn ap_from_ranked(is_tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(is_tp.len());
    let mut recall = Vec::with_capacity(is_tp.len());
    for (i, &hit) in is_tp.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    // precision envelope: running max from the right
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassAp {
    /// `None` when the class has no ground-truth boxes.
    pub ap: Option<f64>,
    pub gt_boxes: usize,
    pub detections: usize,
    pub true_positives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ApSummary {
    pub iou_threshold: f64,
    pub per_class: BTreeMap<String, ClassAp>,
    /// Unweighted mean over classes with ground truth.
    pub map: Option<f64>,
    /// Classes left out of the mean for lack of ground truth.
    pub excluded: Vec<String>,
}

/// Pools each class's detections over all images, ranks them by score
/// (ties by case id, then input order) and greedily matches each against
/// the unmatched same-class ground-truth box of highest IoU in its image.
pub fn average_precision(dets: &[DetectionSet], gts: &[GroundTruth], iou_threshold: f64) -> ApSummary {
    let gt_by_case: BTreeMap<&str, &GroundTruth> = gts.iter().map(|g| (g.case_id.as_str(), g)).collect();

    let mut classes: BTreeSet<&str> = BTreeSet::new();
    for g in gts {
        classes.extend(g.boxes.iter().map(|b| b.label.as_str()));
    }
    for d in dets {
        classes.extend(d.boxes.iter().map(|b| b.label.as_str()));
    }

    let mut per_class = BTreeMap::new();
    let mut excluded = Vec::new();
    for class in classes {
        let mut ranked: Vec<(&str, usize, &BBox)> = Vec::new();
        for d in dets {
            for b in d.boxes.iter().filter(|b| b.label == class) {
                ranked.push((d.case_id.as_str(), ranked.len(), b));
            }
        }
        ranked.sort_by(|a, b| {
            b.2.score
                .partial_cmp(&a.2.score)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.0.cmp(b.0))
                .then_with(|| a.1.cmp(&b.1))
        });

        let n_gt: usize = gts
            .iter()
            .map(|g| g.boxes.iter().filter(|b| b.label == class).count())
            .sum();
        let mut matched: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
        let mut is_tp = Vec::with_capacity(ranked.len());
        for (case, _, det) in &ranked {
            let hit = gt_by_case.get(case).and_then(|g| {
                let used = matched.entry(case).or_insert_with(|| vec![false; g.boxes.len()]);
                let best = g
                    .boxes
                    .iter()
                    .enumerate()
                    .filter(|(j, b)| b.label == class && !used[*j])
                    .map(|(j, b)| (j, iou_box(det, b)))
                    .filter(|&(_, iou)| iou >= iou_threshold)
                    .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then(b.0.cmp(&a.0)));
                best.map(|(j, _)| used[j] = true)
            });
            is_tp.push(hit.is_some());
        }

        let ap = (n_gt > 0).then(|| ap_from_ranked(&is_tp, n_gt));
        if ap.is_none() {
            excluded.push(class.to_string());
        }
        per_class.insert(
            class.to_string(),
            ClassAp {
                ap,
                gt_boxes: n_gt,
                detections: ranked.len(),
                true_positives: is_tp.iter().filter(|&&t| t).count(),
            },
        );
    }

    let aps: Vec<f64> = per_class.values().filter_map(|c| c.ap).collect();
    ApSummary {
        iou_threshold,
        map: (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64),
        per_class,
        excluded,
    }
}

/// Mean over ground-truth-bearing images of the IoU between the
/// highest-scoring prediction and its best-overlapping ground-truth box.
/// Images with ground truth but no prediction count as 0. `None` when no
/// image has ground truth.
pub fn mean_detection_iou(dets: &[DetectionSet], gts: &[GroundTruth]) -> Option<f64> {
    let det_by_case: BTreeMap<&str, &DetectionSet> = dets.iter().map(|d| (d.case_id.as_str(), d)).collect();
    let ious: Vec<f64> = gts
        .iter()
        .filter(|g| !g.boxes.is_empty())
        .map(|g| {
            let top = det_by_case.get(g.case_id.as_str()).and_then(|d| {
                d.boxes
                    .iter()
                    .enumerate()
                    // highest score, earliest on ties
                    .max_by(|a, b| {
                        a.1.score
                            .partial_cmp(&b.1.score)
                            .unwrap_or(Ordering::Equal)
                            .then(b.0.cmp(&a.0))
                    })
                    .map(|(_, b)| b)
            });
            top.map_or(0.0, |p| g.boxes.iter().map(|b| iou_box(p, b)).fold(0.0, f64::max))
        })
        .collect();
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CaseAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Fraction of cases whose predicted class equals the reference class.
/// Both sides must cover exactly the same case ids.
pub fn case_accuracy(
    predicted: &[(String, String)],
    reference: &[(String, String)],
) -> Result<CaseAccuracy, MetricsError> {
    let index = |pairs: &[(String, String)]| -> Result<BTreeMap<String, String>, MetricsError> {
        let mut m = BTreeMap::new();
        for (case, class) in pairs {
            if m.insert(case.clone(), class.clone()).is_some() {
                return Err(MetricsError::DuplicateCase(case.clone()));
            }
        }
        Ok(m)
    };
    let pred = index(predicted)?;
    let gt = index(reference)?;
    if gt.is_empty() && pred.is_empty() {
        return Err(MetricsError::EmptyAlignment);
    }
    if let Some(case) = pred.keys().find(|k| !gt.contains_key(*k)) {
        return Err(MetricsError::UnexpectedCase(case.clone()));
    }
    if let Some(case) = gt.keys().find(|k| !pred.contains_key(*k)) {
        return Err(MetricsError::MissingPrediction(case.clone()));
    }
    let correct = gt.iter().filter(|(case, class)| pred[*case] == **class).count();
    Ok(CaseAccuracy {
        correct,
        total: gt.len(),
        accuracy: correct as f64 / gt.len() as f64,
    })
}

/// Per-case Dice of the merged prediction, averaged over cases that carry
/// a ground-truth mask. Healthy cases without a mask are skipped; a tumor
/// case without one is an error. `None` when no case has a mask.
pub fn mean_dice(predicted: &BTreeMap<String, Mask>, gts: &[GroundTruth]) -> Result<Option<f64>, MetricsError> {
    let mut scores = Vec::new();
    for g in gts {
        let Some(gt_mask) = &g.mask else {
            if g.class != HEALTHY {
                return Err(MetricsError::MissingGroundTruthMask(g.case_id.clone()));
            }
            continue;
        };
        let pred = predicted
            .get(&g.case_id)
            .ok_or_else(|| MetricsError::MissingPrediction(g.case_id.clone()))?;
        scores.push(dice(pred, gt_mask)?);
    }
    Ok((!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Conventions {
    pub ap_interpolation: &'static str,
    pub ap_iou_threshold: f64,
    pub ap_tie_break: &'static str,
    pub mean_iou_definition: &'static str,
    pub dice_both_empty: f64,
    pub iou_empty_union: f64,
    pub dice_case_selection: &'static str,
}

impl Default for Conventions {
    fn default() -> Self {
        Self {
            ap_interpolation: "all-point (precision envelope)",
            ap_iou_threshold: 0.5,
            ap_tie_break: "score desc, then case_id asc, then input order",
            mean_iou_definition: "per image with gt boxes: IoU of the top-scoring prediction with its best-matching gt box; no prediction counts 0",
            dice_both_empty: 1.0,
            iou_empty_union: 1.0,
            dice_case_selection: "cases with a gt mask; healthy cases without one are skipped",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ClassBreakdown {
    pub ap50: Option<f64>,
    pub gt_boxes: usize,
    pub pred_boxes: usize,
    pub cases: usize,
    pub correct_cases: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Counts {
    pub cases: usize,
    pub gt_boxes: usize,
    pub pred_boxes: usize,
    pub dice_cases: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub conventions: Conventions,
    pub map50: Option<f64>,
    pub mean_iou: Option<f64>,
    pub mean_dice: Option<f64>,
    pub case_accuracy: Option<f64>,
    pub per_class: BTreeMap<String, ClassBreakdown>,
    pub excluded_from_map: Vec<String>,
    pub counts: Counts,
}

/// Everything a run predicted; pieces that were not produced are left
/// empty and their metric is reported as absent.
#[derive(Clone, Debug, Default)]
pub struct Predictions {
    pub detections: Vec<DetectionSet>,
    /// `(case_id, class)`
    pub classes: Vec<(String, String)>,
    /// Merged mask per case.
    pub masks: BTreeMap<String, Mask>,
}

pub fn build_report(pred: &Predictions, gts: &[GroundTruth]) -> Result<MetricsReport, MetricsError> {
    let conventions = Conventions::default();
    let ap = average_precision(&pred.detections, gts, conventions.ap_iou_threshold);
    let mean_iou = mean_detection_iou(&pred.detections, gts);
    let dice_cases = gts.iter().filter(|g| g.mask.is_some()).count();
    let mean_dice = if pred.masks.is_empty() {
        None
    } else {
        mean_dice(&pred.masks, gts)?
    };
    let reference: Vec<(String, String)> = gts.iter().map(|g| (g.case_id.clone(), g.class.clone())).collect();
    let accuracy = if pred.classes.is_empty() {
        None
    } else {
        Some(case_accuracy(&pred.classes, &reference)?)
    };

    let mut per_class: BTreeMap<String, ClassBreakdown> = BTreeMap::new();
    for (class, c) in &ap.per_class {
        let e = per_class.entry(class.clone()).or_default();
        e.ap50 = c.ap;
        e.gt_boxes = c.gt_boxes;
        e.pred_boxes = c.detections;
    }
    let pred_class: BTreeMap<&str, &str> = pred.classes.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    for g in gts {
        let e = per_class.entry(g.class.clone()).or_default();
        e.cases += 1;
        if pred_class.get(g.case_id.as_str()) == Some(&g.class.as_str()) {
            e.correct_cases += 1;
        }
    }

    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        conventions,
        map50: ap.map,
        mean_iou,
        mean_dice,
        case_accuracy: accuracy.map(|a| a.accuracy),
        per_class,
        excluded_from_map: ap.excluded,
        counts: Counts {
            cases: gts.len(),
            gt_boxes: gts.iter().map(|g| g.boxes.len()).sum(),
            pred_boxes: pred.detections.iter().map(|d| d.boxes.len()).sum(),
            dice_cases,
        },
    })
}
