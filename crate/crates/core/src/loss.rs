//! Joint detection loss: localisation (L1 + GIoU over assigned queries),
//! identification (sigmoid focal over every query and active class column)
//! and objectness (binary cross-entropy over every query). Each term comes
//! with its analytic gradient with respect to the head outputs.

use serde::{Deserialize, Serialize};

use crate::detector::DetectorOutput;
use crate::geometry::BoundingBox;
use crate::matching::{match_predictions, match_subset, sigmoid, CostWeights, MatchResult};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub localization: f64,
    pub identification: f64,
    pub objectness: f64,
    pub total: f64,
}

/// One supervised query: the logit column it should fire and its box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub query: usize,
    pub column: usize,
    pub bbox: BoundingBox,
}

/// Gradients with respect to the flattened head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    /// `[M, 4]` in (cx, cy, w, h) order.
    pub boxes: Vec<f64>,
    pub class_logits: Vec<f64>,
    pub objectness: Vec<f64>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Sigmoid focal loss of one logit and its derivative.
pub fn focal(x: f64, target: bool, p: &FocalParams) -> (f64, f64) {
    let prob = sigmoid(x);
    let g = p.gamma;
    if target {
        let log_p = -softplus(-x);
        let loss = -p.alpha * (1.0 - prob).powf(g) * log_p;
        let grad = p.alpha * (1.0 - prob).powf(g) * (g * prob * log_p - (1.0 - prob));
        (loss, grad)
    } else {
        let log_1mp = -softplus(x);
        let loss = -(1.0 - p.alpha) * prob.powf(g) * log_1mp;
        let grad = (1.0 - p.alpha) * prob.powf(g) * (prob - g * (1.0 - prob) * log_1mp);
        (loss, grad)
    }
}

/// Binary cross-entropy on a logit and its derivative.
pub fn bce(x: f64, target: f64) -> (f64, f64) {
    (softplus(x) - target * x, sigmoid(x) - target)
}

/// GIoU of `a` against fixed `b`, with its gradient with respect to the
/// corners of `a`.
pub fn giou_with_grad(a: [f64; 4], b: [f64; 4]) -> (f64, [f64; 4]) {
    let [x1, y1, x2, y2] = a;
    let [bx1, by1, bx2, by2] = b;
    let iw_raw = x2.min(bx2) - x1.max(bx1);
    let ih_raw = y2.min(by2) - y1.max(by1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let (aw, ah) = (x2 - x1, y2 - y1);
    let area_a = aw * ah;
    let area_b = (bx2 - bx1) * (by2 - by1);
    let union = area_a + area_b - inter;
    let cw = x2.max(bx2) - x1.min(bx1);
    let ch = y2.max(by2) - y1.min(by1);
    let enclosure = cw * ch;
    if union <= 0.0 || enclosure <= 0.0 {
        let iou = if union > 0.0 { inter / union } else { 0.0 };
        return (iou, [0.0; 4]);
    }
    let value = inter / union - (enclosure - union) / enclosure;

    let mut d_inter = [0.0; 4];
    if iw_raw > 0.0 && ih_raw > 0.0 {
        if x1 > bx1 {
            d_inter[0] = -ih;
        }
        if x2 < bx2 {
            d_inter[2] = ih;
        }
        if y1 > by1 {
            d_inter[1] = -iw;
        }
        if y2 < by2 {
            d_inter[3] = iw;
        }
    }
    let d_area = [-ah, -aw, ah, aw];
    let mut d_enc = [0.0; 4];
    if x1 < bx1 {
        d_enc[0] = -ch;
    }
    if x2 > bx2 {
        d_enc[2] = ch;
    }
    if y1 < by1 {
        d_enc[1] = -cw;
    }
    if y2 > by2 {
        d_enc[3] = cw;
    }
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter[k];
        grad[k] = d_inter[k] / union - inter / (union * union) * d_union + d_union / enclosure
            - union / (enclosure * enclosure) * d_enc[k];
    }
    (value, grad)
}

/// Subgradient of `|d|`, zero at the kink (`f64::signum` gives 1 at +0).
fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Corner-space gradient mapped back to (cx, cy, w, h).
fn corners_to_center_grad(g: [f64; 4]) -> [f64; 4] {
    [g[0] + g[2], g[1] + g[3], 0.5 * (g[2] - g[0]), 0.5 * (g[3] - g[1])]
}

/// Loss and gradients for a fixed query/target assignment. Only logit
/// columns listed in `active_columns` contribute to identification.
pub fn joint_loss(
    pred: &DetectorOutput,
    targets: &[Target],
    active_columns: &[usize],
    w: &CostWeights,
    focal_params: &FocalParams,
) -> (LossBreakdown, HeadGrads) {
    let m = pred.boxes.len();
    let cols = pred.class_logits.cols();
    let mut grads = HeadGrads {
        boxes: vec![0.0; m * 4],
        class_logits: vec![0.0; m * cols],
        objectness: vec![0.0; m],
    };

    let mut localization = 0.0;
    if !targets.is_empty() {
        let norm = 1.0 / targets.len() as f64;
        for t in targets {
            let pb = pred.boxes[t.query];
            let p = pb.to_array();
            let tb = t.bbox.to_array();
            for k in 0..4 {
                let d = p[k] - tb[k];
                localization += norm * w.l1 * d.abs();
                grads.boxes[t.query * 4 + k] += norm * w.l1 * sign(d);
            }
            let (gi, gc) = giou_with_grad(pb.corners(), t.bbox.corners());
            localization += norm * w.giou * (1.0 - gi);
            let gc = corners_to_center_grad(gc);
            for k in 0..4 {
                grads.boxes[t.query * 4 + k] -= norm * w.giou * gc[k];
            }
        }
    }

    let mut positive = vec![None; m];
    for t in targets {
        positive[t.query] = Some(t.column);
    }
    let id_norm = 1.0 / (targets.len().max(1)) as f64;
    let mut identification = 0.0;
    for q in 0..m {
        for &c in active_columns {
            let (l, g) = focal(pred.class_logits.at(q, c), positive[q] == Some(c), focal_params);
            identification += id_norm * l;
            grads.class_logits[q * cols + c] += id_norm * g;
        }
    }

    let mut objectness = 0.0;
    let obj_norm = 1.0 / m as f64;
    for q in 0..m {
        let t = if positive[q].is_some() { 1.0 } else { 0.0 };
        let (l, g) = bce(pred.objectness[q], t);
        objectness += obj_norm * l;
        grads.objectness[q] += obj_norm * g;
    }

    let breakdown = LossBreakdown {
        localization,
        identification,
        objectness,
        total: localization + identification + objectness,
    };
    (breakdown, grads)
}

/// Known ground truth matched over all queries; pseudo-unknown boxes then
/// matched among the leftover queries with the unknown column as class.
pub fn assign_targets(
    pred: &DetectorOutput,
    known: &[(usize, BoundingBox)],
    pseudo: &[BoundingBox],
    unknown_column: usize,
    w: &CostWeights,
) -> (MatchResult, Vec<Target>) {
    let matched = match_predictions(pred, known, w);
    let mut targets: Vec<Target> = matched
        .pairs
        .iter()
        .map(|&(q, g)| Target {
            query: q,
            column: known[g].0,
            bbox: known[g].1,
        })
        .collect();
    let pseudo_targets: Vec<(usize, BoundingBox)> = pseudo.iter().map(|b| (unknown_column, *b)).collect();
    for (q, p) in match_subset(pred, &matched.unmatched_queries, &pseudo_targets, w) {
        targets.push(Target {
            query: q,
            column: unknown_column,
            bbox: pseudo[p],
        });
    }
    targets.sort_by_key(|t| t.query);
    (matched, targets)
}
