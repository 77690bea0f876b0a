//! Pipeline stages. Each reads its inputs from files and writes its output
//! atomically, so `run` is literally the composition of the subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use logsam_core::detect2seg::{
    merged_mask_path, segment_from_boxes, threshold_boxes, yolo_to_xyxy, BBox, BoxFill, DetectionSet, ExternalMasks,
    Mask, Segmenter,
};
use logsam_core::grounder::{predict_detections, GrounderModel, IMAGE_SIZE};
use logsam_core::metrics::{build_report, GroundTruth, MetricsReport, Predictions};
use logsam_core::pgm::GrayImage;
use logsam_core::prompt::{extract, load_pack_dir, NegationRules, Transcript, VocabularyMap};
use logsam_core::tensor::Checkpoint;
use rayon::prelude::*;

use crate::config::SegmenterKind;
use crate::records::{
    check_case_id, read_jsonl, to_jsonl, write_atomic, AnnotationLine, DetectionLine, Failure, PromptLine,
    TranscriptLine, Versioned, SCHEMA_VERSION,
};

pub fn load_packs(rules_dir: Option<&Path>) -> Result<(VocabularyMap, NegationRules)> {
    match rules_dir {
        Some(dir) => load_pack_dir(dir).with_context(|| format!("loading rule packs from {}", dir.display())),
        None => Ok((VocabularyMap::builtin(), NegationRules::builtin())),
    }
}

pub fn extract_prompts(transcripts: &Path, rules_dir: Option<&Path>, out: &Path) -> Result<()> {
    let (vocab, rules) = load_packs(rules_dir)?;
    let lines: Vec<TranscriptLine> = read_jsonl(transcripts)?;
    let records: Vec<_> = lines
        .into_par_iter()
        .map(|l| {
            let t = Transcript {
                case_id: l.case_id,
                text: l.text,
            };
            Versioned::new(extract(&t, &vocab, &rules))
        })
        .collect();
    write_atomic(out, &to_jsonl(&records)?)
}

fn load_image(images: &Path, case_id: &str) -> Result<Vec<f64>> {
    check_case_id(case_id)?;
    let img = GrayImage::load(&images.join(format!("{case_id}.pgm")))?;
    if (img.width, img.height) != (IMAGE_SIZE, IMAGE_SIZE) {
        bail!(
            "image is {}×{}, the grounder takes {IMAGE_SIZE}×{IMAGE_SIZE}",
            img.width,
            img.height
        );
    }
    Ok(img.to_unit())
}

pub fn load_model(checkpoint: &Path) -> Result<GrounderModel> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    Ok(GrounderModel::from_checkpoint(&ck)?)
}

/// One detection record per prompt. Cases that fail (e.g. a missing image)
/// are left out of the output and returned as failures.
pub fn detect(checkpoint: &Path, prompts: &Path, images: &Path, out: &Path) -> Result<Vec<Failure>> {
    let model = load_model(checkpoint)?;
    let prompts: Vec<PromptLine> = read_jsonl(prompts)?;
    let results: Vec<Result<DetectionSet, Failure>> = prompts
        .par_iter()
        .map(|p| {
            load_image(images, &p.case_id)
                .and_then(|px| Ok(predict_detections(&model, &px, &p.prompt, &p.case_id)?))
                .map_err(|e| Failure {
                    stage: "detect",
                    case_id: p.case_id.clone(),
                    error: format!("{e:#}"),
                })
        })
        .collect();
    let mut sets = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(s) => sets.push(Versioned::new(s)),
            Err(f) => failures.push(f),
        }
    }
    write_atomic(out, &to_jsonl(&sets)?)?;
    Ok(failures)
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionSet>> {
    Ok(read_jsonl::<DetectionLine>(path)?
        .into_iter()
        .map(DetectionLine::into_set)
        .collect())
}

pub fn filter(detections: &Path, tau: f64, out: &Path) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        bail!("tau must lie in [0, 1], got {tau}");
    }
    let sets: Vec<_> = read_detections(detections)?
        .iter()
        .map(|d| Versioned::new(threshold_boxes(d, tau)))
        .collect();
    write_atomic(out, &to_jsonl(&sets)?)
}

pub fn make_segmenter(kind: SegmenterKind, masks_dir: Option<&Path>) -> Result<Box<dyn Segmenter>> {
    Ok(match kind {
        SegmenterKind::BoxFill => Box::new(BoxFill),
        SegmenterKind::External => Box::new(ExternalMasks {
            dir: masks_dir
                .context("the external segmenter needs a masks directory")?
                .to_path_buf(),
        }),
    })
}

/// Writes `<case>__<i>.pgm` per box and the merged `<case>.pgm`, which is
/// all zero when the case has no boxes.
pub fn segment(detections: &Path, segmenter: &dyn Segmenter, masks_out: &Path) -> Result<Vec<Failure>> {
    let sets = read_detections(detections)?;
    fs::create_dir_all(masks_out).with_context(|| format!("creating {}", masks_out.display()))?;
    let per_case: Vec<Result<Vec<Failure>>> = sets
        .par_iter()
        .map(|d| {
            check_case_id(&d.case_id)?;
            let seg = segment_from_boxes(d, segmenter);
            for (i, m) in &seg.masks {
                let path = masks_out.join(format!("{}__{i}.pgm", d.case_id));
                write_atomic(&path, &m.to_image().encode())?;
            }
            let merged = seg.merged(d.width, d.height)?;
            write_atomic(&merged_mask_path(masks_out, &d.case_id), &merged.to_image().encode())?;
            Ok(seg
                .failures
                .into_iter()
                .map(|f| Failure {
                    stage: "segment",
                    case_id: d.case_id.clone(),
                    error: format!("box {}: {}", f.box_index, f.error),
                })
                .collect())
        })
        .collect();
    let mut failures = Vec::new();
    for r in per_case {
        failures.extend(r?);
    }
    Ok(failures)
}

pub struct EvalInputs {
    pub annotations: PathBuf,
    pub gt_masks: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub masks: Option<PathBuf>,
}

pub fn load_ground_truth(annotations: &Path, gt_masks: Option<&Path>) -> Result<Vec<GroundTruth>> {
    let lines: Vec<AnnotationLine> = read_jsonl(annotations)?;
    lines
        .into_iter()
        .map(|a| {
            check_case_id(&a.case_id)?;
            let boxes = a
                .boxes_yolo
                .iter()
                .map(|&[cx, cy, w, h]| {
                    let [x1, y1, x2, y2] = yolo_to_xyxy(cx, cy, w, h, a.width, a.height)
                        .with_context(|| format!("annotation of `{}`", a.case_id))?;
                    Ok(BBox {
                        x1,
                        y1,
                        x2,
                        y2,
                        score: 1.0,
                        label: a.class.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mask = match gt_masks {
                Some(dir) => {
                    let p = merged_mask_path(dir, &a.case_id);
                    p.exists().then(|| Mask::load(&p)).transpose()?
                }
                None => None,
            };
            Ok(GroundTruth {
                case_id: a.case_id,
                class: a.class,
                boxes,
                mask,
            })
        })
        .collect()
}

/// Builds the report. A case with no predicted mask file counts as an
/// empty prediction.
pub fn evaluate(inputs: &EvalInputs) -> Result<MetricsReport> {
    let gts = load_ground_truth(&inputs.annotations, inputs.gt_masks.as_deref())?;
    let mut pred = Predictions::default();
    if let Some(p) = &inputs.prompts {
        pred.classes = read_jsonl::<PromptLine>(p)?
            .into_iter()
            .map(|l| (l.case_id, l.class))
            .collect();
    }
    if let Some(d) = &inputs.detections {
        pred.detections = read_detections(d)?;
    }
    if let Some(dir) = &inputs.masks {
        let mut masks = BTreeMap::new();
        for g in &gts {
            let p = merged_mask_path(dir, &g.case_id);
            let m = if p.exists() {
                Mask::load(&p)?
            } else {
                let (w, h) = g.mask.as_ref().map(Mask::dims).unwrap_or((IMAGE_SIZE, IMAGE_SIZE));
                Mask::empty(w, h)
            };
            masks.insert(g.case_id.clone(), m);
        }
        pred.masks = masks;
    }
    Ok(build_report(&pred, &gts)?)
}

pub fn report_bytes(report: &MetricsReport) -> Result<Vec<u8>> {
    debug_assert_eq!(report.schema_version, SCHEMA_VERSION);
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s.into_bytes())
}
