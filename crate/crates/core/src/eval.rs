//! Detection evaluation: per-class NMS, average precision at IoU 0.5, mAP
//! over the classes seen so far, and the offline-normalized incremental
//! score computed from a learning curve.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::types::{ClassId, Detection, ImageAnnotation, ImageId};

pub const NMS_IOU: f64 = 0.3;
pub const MAX_DETECTIONS: usize = 128;
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// Exact area under the interpolated precision-recall curve.
    #[default]
    AllPoint,
    /// Mean interpolated precision at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

/// Descending score, then box coordinates.
fn by_score(a: &Detection, b: &Detection) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.bbox.lex_cmp(&b.bbox))
}

/// Greedy per-class suppression of boxes overlapping a kept box by more than
/// `iou_thresh`, then the `max_out` best survivors overall.
pub fn nms(dets: &[Detection], iou_thresh: f64, max_out: usize) -> Vec<Detection> {
    let mut by_class: BTreeMap<ClassId, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        by_class.entry(d.class_id).or_default().push(*d);
    }
    let mut kept = Vec::new();
    for (_, mut group) in by_class {
        group.sort_by(by_score);
        let mut survivors: Vec<Detection> = Vec::new();
        for d in group {
            if survivors.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_thresh) {
                survivors.push(d);
            }
        }
        kept.extend(survivors);
    }
    kept.sort_by(|a, b| by_score(a, b).then(a.class_id.cmp(&b.class_id)));
    kept.truncate(max_out);
    kept
}

/// Area under the precision envelope for one class. `dets` pairs each
/// detection with its image; `gts` holds that class's boxes per image.
/// Returns `None` when the class has no ground truth.
pub fn average_precision(
    dets: &[(ImageId, Detection)],
    gts: &BTreeMap<ImageId, Vec<BoundingBox>>,
    mode: ApMode,
) -> Option<f64> {
    let total: usize = gts.values().map(Vec::len).sum();
    if total == 0 {
        return None;
    }
    let mut order: Vec<&(ImageId, Detection)> = dets.iter().collect();
    order.sort_by(|a, b| by_score(&a.1, &b.1).then_with(|| a.0.cmp(&b.0)));
    let mut used: BTreeMap<&ImageId, Vec<bool>> = gts.iter().map(|(k, v)| (k, vec![false; v.len()])).collect();
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(order.len());
    for (i, (image, det)) in order.iter().enumerate() {
        let hit = gts.get(image).and_then(|boxes| {
            let flags = used.get_mut(image).expect("same keys");
            let best = boxes
                .iter()
                .enumerate()
                .filter(|(j, _)| !flags[*j])
                .map(|(j, g)| (j, iou(&det.bbox, g)))
                .fold(None::<(usize, f64)>, |acc, cur| match acc {
                    Some(a) if a.1 >= cur.1 => Some(a),
                    _ => Some(cur),
                })?;
            (best.1 >= MATCH_IOU).then(|| flags[best.0] = true)
        });
        if hit.is_some() {
            tp += 1;
        }
        points.push((tp as f64 / total as f64, tp as f64 / (i + 1) as f64));
    }
    Some(match mode {
        ApMode::AllPoint => {
            let mut envelope: Vec<f64> = points.iter().map(|p| p.1).collect();
            for i in (0..envelope.len().saturating_sub(1)).rev() {
                envelope[i] = envelope[i].max(envelope[i + 1]);
            }
            let mut area = 0.0;
            let mut prev_recall = 0.0;
            for (&(r, _), p) in points.iter().zip(&envelope) {
                area += (r - prev_recall) * p;
                prev_recall = r;
            }
            area
        }
        ApMode::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    points.iter().filter(|p| p.0 >= t - 1e-12).map(|p| p.1).fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub t: usize,
    pub per_class_ap: BTreeMap<ClassId, f64>,
    pub map: f64,
    pub classes_evaluated: BTreeSet<ClassId>,
    /// Seen classes with no ground truth in the test set; left out of `map`.
    #[serde(default)]
    pub classes_without_gt: BTreeSet<ClassId>,
}

/// Detections for one test image, already suppressed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageDetections {
    pub image_id: ImageId,
    pub detections: Vec<Detection>,
}

/// Scores `dets` against `annotations` over the classes in `seen`.
/// Annotations holding boxes of classes outside `seen` are rejected; restrict
/// them first.
pub fn evaluate(
    t: usize,
    dets: &[ImageDetections],
    annotations: &[ImageAnnotation],
    seen: &BTreeSet<ClassId>,
    mode: ApMode,
) -> Result<EvalReport> {
    let mut gts: BTreeMap<ClassId, BTreeMap<ImageId, Vec<BoundingBox>>> =
        seen.iter().map(|&c| (c, BTreeMap::new())).collect();
    for ann in annotations {
        for b in &ann.boxes {
            let per_class = gts.get_mut(&b.class_id).ok_or_else(|| {
                Error::Domain(format!(
                    "image {} has a box of class {} which has not been learned yet",
                    ann.image_id, b.class_id
                ))
            })?;
            per_class.entry(ann.image_id.clone()).or_default().push(b.bbox);
        }
    }
    let mut per_class_dets: BTreeMap<ClassId, Vec<(ImageId, Detection)>> = BTreeMap::new();
    for img in dets {
        for d in &img.detections {
            per_class_dets.entry(d.class_id).or_default().push((img.image_id.clone(), *d));
        }
    }
    let mut report = EvalReport {
        t,
        per_class_ap: BTreeMap::new(),
        map: 0.0,
        classes_evaluated: BTreeSet::new(),
        classes_without_gt: BTreeSet::new(),
    };
    for (&c, class_gts) in &gts {
        let d = per_class_dets.get(&c).map(Vec::as_slice).unwrap_or(&[]);
        match average_precision(d, class_gts, mode) {
            Some(ap) => {
                report.per_class_ap.insert(c, ap);
                report.classes_evaluated.insert(c);
            }
            None => {
                report.classes_without_gt.insert(c);
            }
        }
    }
    if !report.per_class_ap.is_empty() {
        report.map = report.per_class_ap.values().sum::<f64>() / report.per_class_ap.len() as f64;
    }
    Ok(report)
}

/// Denominators for the normalized score.
#[derive(Debug, Clone, PartialEq)]
pub enum OfflineReference {
    Constant(f64),
    PerStep(Vec<f64>),
}

/// Mean over checkpoints of `alpha_t / offline_t`.
pub fn omega_map(alphas: &[f64], offline: &OfflineReference) -> Result<f64> {
    if alphas.is_empty() {
        return Err(Error::Domain("no checkpoints to average".into()));
    }
    let denominators: Vec<f64> = match offline {
        OfflineReference::Constant(c) => vec![*c; alphas.len()],
        OfflineReference::PerStep(v) => {
            if v.len() != alphas.len() {
                return Err(Error::Domain(format!(
                    "{} checkpoints but {} offline values",
                    alphas.len(),
                    v.len()
                )));
            }
            v.clone()
        }
    };
    if let Some(bad) = denominators.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::Domain(format!("offline mAP must be positive, got {bad}")));
    }
    if alphas.iter().any(|a| !a.is_finite()) {
        return Err(Error::Domain("non-finite mAP value".into()));
    }
    Ok(alphas.iter().zip(&denominators).map(|(a, o)| a / o).sum::<f64>() / alphas.len() as f64)
}

/// Writes one row per checkpoint: `t`, `map`, then `ap_<class>` for every
/// class that appears in any report (empty when not yet evaluated).
pub fn write_curves(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let classes: BTreeSet<ClassId> = reports.iter().flat_map(|r| r.per_class_ap.keys().copied()).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string(), "map".to_string()];
    header.extend(classes.iter().map(|c| format!("ap_{}", c.0)));
    w.write_record(&header)?;
    for r in reports {
        let mut row = vec![r.t.to_string(), format!("{}", r.map)];
        row.extend(classes.iter().map(|c| r.per_class_ap.get(c).map_or(String::new(), |v| format!("{v}"))));
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    crate::io::write_atomic(path, &bytes)
}

/// One learning-curve row.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub t: usize,
    pub map: f64,
    pub per_class_ap: BTreeMap<ClassId, f64>,
}

pub fn read_curves(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let t_col = header.iter().position(|h| h == "t");
    let map_col = header.iter().position(|h| h == "map");
    let (Some(t_col), Some(map_col)) = (t_col, map_col) else {
        return Err(Error::Parse { offset: 0, message: "curve file needs `t` and `map` columns".into() });
    };
    let class_cols: Vec<(usize, ClassId)> = header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix("ap_").and_then(|c| c.parse().ok()).map(|c| (i, ClassId(c))))
        .collect();
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let offset = rec.position().map_or(0, |p| p.byte());
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let bad = |what: &str| Error::Parse { offset, message: format!("bad {what} value in curve file") };
        let t = field(t_col).parse().map_err(|_| bad("t"))?;
        let map = field(map_col).parse().map_err(|_| bad("map"))?;
        let mut per_class_ap = BTreeMap::new();
        for &(i, c) in &class_cols {
            if !field(i).is_empty() {
                per_class_ap.insert(c, field(i).parse().map_err(|_| bad("ap"))?);
            }
        }
        out.push(CurvePoint { t, map, per_class_ap });
    }
    Ok(out)
}
