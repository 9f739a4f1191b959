//! Open-world detection metrics: known-class AP/mAP, unknown recall,
//! wilderness impact and absolute open-set error.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, Detection, Label};
use crate::protocol::{ClassRegistry, Instance, TaskSpec};

pub const IOU_THRESHOLD: f64 = 0.5;
pub const MAX_DETECTIONS: usize = 50;
pub const WI_RECALL_LEVEL: f64 = 0.8;

/// Detections and full ground truth (unknown classes included) of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: u64,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<Instance>,
}

impl EvalRecord {
    /// Sorts detections by descending score (stable) and keeps the top 50.
    pub fn new(image_id: u64, mut detections: Vec<Detection>, ground_truth: Vec<Instance>) -> Self {
        detections.sort_by(|a, b| b.score.total_cmp(&a.score));
        detections.truncate(MAX_DETECTIONS);
        Self {
            image_id,
            detections,
            ground_truth,
        }
    }
}

/// Greedy one-to-one matching within one image: detections (indices into
/// `dets`, already in descending score order) each claim the unclaimed GT
/// of highest IOU ≥ `thr`. Returns the matched GT index per detection.
fn greedy_match(
    dets: &[&Detection],
    gts: &[&Instance],
    thr: f64,
) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let o = iou(&d.bbox, &gt.bbox);
                if o >= thr && best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            best.map(|(g, _)| g)
        })
        .collect()
}

/// All-point interpolated area under the precision/recall curve of a
/// ranked TP/FP list.
pub fn all_point_ap(is_tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(is_tp.len());
    let mut recall = Vec::with_capacity(is_tp.len());
    let mut tp = 0usize;
    for (k, &hit) in is_tp.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..recall.len() {
        if recall[k] > prev_recall {
            ap += (recall[k] - prev_recall) * precision[k];
            prev_recall = recall[k];
        }
    }
    ap
}

/// AP of one known class; `None` when the class has no ground truth.
///
/// Detections that miss every GT of the class but overlap an unknown-class
/// GT are ignored rather than counted as false positives.
pub fn average_precision(records: &[EvalRecord], class: u32, reg: &ClassRegistry, thr: f64) -> Option<f64> {
    let mut ranked: Vec<(f64, u64, usize, bool)> = Vec::new();
    let mut num_gt = 0;
    for rec in records {
        let gts: Vec<&Instance> = rec.ground_truth.iter().filter(|g| g.class == class).collect();
        let unknown: Vec<&Instance> = rec.ground_truth.iter().filter(|g| !reg.is_known(g.class)).collect();
        num_gt += gts.len();
        let dets: Vec<(usize, &Detection)> = rec
            .detections
            .iter()
            .enumerate()
            .filter(|(_, d)| d.label == Label::Known(class))
            .collect();
        let refs: Vec<&Detection> = dets.iter().map(|(_, d)| *d).collect();
        let matched = greedy_match(&refs, &gts, thr);
        for ((idx, d), m) in dets.iter().zip(matched) {
            let on_unknown = unknown.iter().any(|u| iou(&d.bbox, &u.bbox) >= thr);
            if m.is_none() && on_unknown {
                continue;
            }
            ranked.push((d.score, rec.image_id, *idx, m.is_some()));
        }
    }
    if num_gt == 0 {
        return None;
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let hits: Vec<bool> = ranked.iter().map(|r| r.3).collect();
    Some(all_point_ap(&hits, num_gt))
}

fn unknown_gt<'a>(rec: &'a EvalRecord, reg: &ClassRegistry) -> Vec<&'a Instance> {
    rec.ground_truth.iter().filter(|g| !reg.is_known(g.class)).collect()
}

pub fn count_unknown_gt(records: &[EvalRecord], reg: &ClassRegistry) -> usize {
    records.iter().map(|r| unknown_gt(r, reg).len()).sum()
}

/// Fraction of unknown-class GT recovered by unknown-labelled detections.
pub fn u_recall(records: &[EvalRecord], reg: &ClassRegistry) -> Result<f64> {
    let total = count_unknown_gt(records, reg);
    if total == 0 {
        return Err(Error::NoUnknownGt);
    }
    let mut hit = 0;
    for rec in records {
        let gts = unknown_gt(rec, reg);
        let dets: Vec<&Detection> = rec.detections.iter().filter(|d| d.label.is_unknown()).collect();
        hit += greedy_match(&dets, &gts, IOU_THRESHOLD).iter().flatten().count();
    }
    Ok(hit as f64 / total as f64)
}

/// Number of unknown-class GT claimed by a known-labelled detection, each
/// GT counted at most once.
pub fn a_ose(records: &[EvalRecord], reg: &ClassRegistry) -> usize {
    records
        .iter()
        .map(|rec| {
            let gts = unknown_gt(rec, reg);
            let dets: Vec<&Detection> = rec.detections.iter().filter(|d| !d.label.is_unknown()).collect();
            greedy_match(&dets, &gts, IOU_THRESHOLD).iter().flatten().count()
        })
        .sum()
}

/// `P_K / P_{K∪U} − 1` at the score threshold where known-class recall on
/// known-only images first reaches `recall_level`.
pub fn wilderness_impact(records: &[EvalRecord], reg: &ClassRegistry, recall_level: f64) -> Result<f64> {
    // (score, image id, index, true positive, image has unknown GT)
    let mut ranked: Vec<(f64, u64, usize, bool, bool)> = Vec::new();
    let mut known_gt_clean = 0;
    for rec in records {
        let has_unknown = rec.ground_truth.iter().any(|g| !reg.is_known(g.class));
        if !has_unknown {
            known_gt_clean += rec.ground_truth.len();
        }
        let mut by_class: BTreeMap<u32, Vec<(usize, &Detection)>> = BTreeMap::new();
        for (i, d) in rec.detections.iter().enumerate() {
            if let Label::Known(c) = d.label {
                by_class.entry(c).or_default().push((i, d));
            }
        }
        for (class, dets) in by_class {
            let gts: Vec<&Instance> = rec.ground_truth.iter().filter(|g| g.class == class).collect();
            let refs: Vec<&Detection> = dets.iter().map(|(_, d)| *d).collect();
            for ((i, d), m) in dets.iter().zip(greedy_match(&refs, &gts, IOU_THRESHOLD)) {
                ranked.push((d.score, rec.image_id, *i, m.is_some(), has_unknown));
            }
        }
    }
    if known_gt_clean == 0 {
        return Err(Error::UnreachableRecall(recall_level));
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut tp = 0usize;
    let mut threshold = None;
    for r in ranked.iter().filter(|r| !r.4) {
        if r.3 {
            tp += 1;
        }
        if tp as f64 / known_gt_clean as f64 >= recall_level - 1e-12 {
            threshold = Some(r.0);
            break;
        }
    }
    let tau = threshold.ok_or(Error::UnreachableRecall(recall_level))?;
    let above: Vec<_> = ranked.iter().filter(|r| r.0 >= tau).collect();
    let precision = |rows: &[&&(f64, u64, usize, bool, bool)]| {
        rows.iter().filter(|r| r.3).count() as f64 / rows.len() as f64
    };
    let clean: Vec<_> = above.iter().filter(|r| !r.4).collect();
    let all: Vec<_> = above.iter().collect();
    let p_k = precision(&clean);
    let p_ku = precision(&all);
    Ok(p_k / p_ku - 1.0)
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: usize,
    /// AP per known class name, for classes with ground truth.
    pub per_class_ap: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub previously_known_map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub current_known_map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub both_map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub u_recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wilderness_impact: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub a_ose: Option<usize>,
    pub images: usize,
    pub known_instances: usize,
    pub unknown_instances: usize,
    pub detections: usize,
}

pub fn assemble_report(records: &[EvalRecord], reg: &ClassRegistry, spec: &TaskSpec, wi_recall: f64) -> MetricsReport {
    let mut per_class_ap = BTreeMap::new();
    let (mut prev, mut cur, mut both) = (Vec::new(), Vec::new(), Vec::new());
    for &class in reg.known() {
        if let Some(ap) = average_precision(records, class, reg, IOU_THRESHOLD) {
            per_class_ap.insert(spec.class_name(class).to_string(), ap);
            both.push(ap);
            if reg.previously_known().contains(&class) {
                prev.push(ap);
            } else {
                cur.push(ap);
            }
        }
    }
    let unknown_instances = count_unknown_gt(records, reg);
    let has_unknown = unknown_instances > 0;
    MetricsReport {
        task: reg.task() + 1,
        per_class_ap,
        previously_known_map: mean(&prev),
        current_known_map: mean(&cur),
        both_map: mean(&both),
        u_recall: has_unknown.then(|| u_recall(records, reg).ok()).flatten(),
        wilderness_impact: if has_unknown {
            wilderness_impact(records, reg, wi_recall).ok()
        } else {
            None
        },
        a_ose: has_unknown.then(|| a_ose(records, reg)),
        images: records.len(),
        known_instances: records
            .iter()
            .flat_map(|r| &r.ground_truth)
            .filter(|g| reg.is_known(g.class))
            .count(),
        unknown_instances,
        detections: records.iter().map(|r| r.detections.len()).sum(),
    }
}

impl MetricsReport {
    /// Aligned text table: unknown metrics, then the three mAP columns.
    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<6} {:>9} {:>8} {:>6} {:>10} {:>10} {:>8}",
            "task", "U-Recall", "WI", "A-OSE", "prev mAP", "curr mAP", "both"
        );
        let _ = writeln!(
            out,
            "{:<6} {:>9} {:>8} {:>6} {:>10} {:>10} {:>8}",
            self.task,
            pct(self.u_recall),
            self.wilderness_impact.map_or("-".to_string(), |v| format!("{v:.4}")),
            self.a_ose.map_or("-".to_string(), |v| v.to_string()),
            pct(self.previously_known_map),
            pct(self.current_known_map),
            pct(self.both_map),
        );
        out.push('\n');
        for (name, ap) in &self.per_class_ap {
            let _ = writeln!(out, "  AP {name:<10} {:>6.2}", 100.0 * ap);
        }
        let _ = writeln!(
            out,
            "  images {}  known {}  unknown {}  detections {}",
            self.images, self.known_instances, self.unknown_instances, self.detections
        );
        out
    }
}
