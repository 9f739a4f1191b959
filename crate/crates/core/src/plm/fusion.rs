//! Score fusion of model-driven candidates with input-driven proposals, and
//! the final top-k pseudo-label selection.

use crate::geometry::{iou, nms_indices, score_order, BoundingBox};
use crate::tensor::Tensor;

/// Candidates overlapping a known ground-truth box above this are dropped.
pub const GT_OVERLAP_THRESHOLD: f64 = 0.5;
pub const CANDIDATE_NMS_THRESHOLD: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoCandidate {
    pub bbox: BoundingBox,
    /// Raw model-driven objectness `s_o`.
    pub objectness: f64,
    /// Fused score `S_i`; zero until [`fuse_scores`] runs.
    pub score: f64,
}

impl PseudoCandidate {
    pub fn new(bbox: BoundingBox, objectness: f64) -> Self {
        Self {
            bbox,
            objectness,
            score: 0.0,
        }
    }
}

/// Min-max normalisation; a constant list maps to all ones.
pub fn normalize_objectness(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![1.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// `norm(s_o)^W_m · maxIOU^W_I`, with `0^0` taken as 1.
pub fn fused_score(norm_objectness: f64, max_iou: f64, w_m: f64, w_i: f64) -> f64 {
    norm_objectness.powf(w_m) * max_iou.powf(w_i)
}

pub fn max_iou(bbox: &BoundingBox, input_boxes: &[BoundingBox]) -> f64 {
    input_boxes.iter().map(|p| iou(p, bbox)).fold(0.0, f64::max)
}

pub fn fuse_scores(
    candidates: &[PseudoCandidate],
    input_boxes: &[BoundingBox],
    w_m: f64,
    w_i: f64,
) -> Vec<PseudoCandidate> {
    let raw: Vec<f64> = candidates.iter().map(|c| c.objectness).collect();
    let norm = normalize_objectness(&raw);
    candidates
        .iter()
        .zip(norm)
        .map(|(c, n)| PseudoCandidate {
            score: fused_score(n, max_iou(&c.bbox, input_boxes), w_m, w_i),
            ..*c
        })
        .collect()
}

/// Indices (into `scored`) of the chosen pseudo-labels, best first.
///
/// Zero-score candidates are never selected: a fused score of 0 means no
/// proposal supports the box at all.
pub fn select_pseudo_indices(scored: &[PseudoCandidate], gt_known: &[BoundingBox], k: usize) -> Vec<usize> {
    let eligible: Vec<usize> = (0..scored.len())
        .filter(|&i| scored[i].score > 0.0)
        .filter(|&i| gt_known.iter().all(|g| iou(&scored[i].bbox, g) <= GT_OVERLAP_THRESHOLD))
        .collect();
    let boxes: Vec<BoundingBox> = eligible.iter().map(|&i| scored[i].bbox).collect();
    let scores: Vec<f64> = eligible.iter().map(|&i| scored[i].score).collect();
    nms_indices(&boxes, &scores, CANDIDATE_NMS_THRESHOLD)
        .into_iter()
        .take(k)
        .map(|j| eligible[j])
        .collect()
}

pub fn select_pseudo_labels(scored: &[PseudoCandidate], gt_known: &[BoundingBox], k: usize) -> Vec<BoundingBox> {
    select_pseudo_indices(scored, gt_known, k)
        .into_iter()
        .map(|i| scored[i].bbox)
        .collect()
}

/// Mean of the `[H', W']` map over cells whose centres lie inside each box.
pub fn attention_driven_scores(feature_map: &Tensor, boxes: &[BoundingBox]) -> Vec<f64> {
    let (gh, gw) = (feature_map.rows(), feature_map.cols());
    boxes
        .iter()
        .map(|b| {
            if b.is_degenerate() {
                return 0.0;
            }
            let (mut sum, mut count) = (0.0, 0usize);
            for r in 0..gh {
                let cy = (r as f64 + 0.5) / gh as f64;
                for c in 0..gw {
                    let cx = (c as f64 + 0.5) / gw as f64;
                    if b.contains_point(cx, cy) {
                        sum += feature_map.at(r, c);
                        count += 1;
                    }
                }
            }
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        })
        .collect()
}

/// Argmax of the fused scores with index tie-break.
pub fn best_candidate(scored: &[PseudoCandidate]) -> Option<usize> {
    let scores: Vec<f64> = scored.iter().map(|c| c.score).collect();
    score_order(&scores).first().copied()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corner(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::from_corners(x1, y1, x2, y2)
    }

    #[test]
    fn fusion_examples() {
        for w_m in [0.1, 0.5, 0.8] {
            assert!((fused_score(0.5, 0.5, w_m, 1.0 - w_m) - 0.5).abs() < 1e-12);
            assert_eq!(fused_score(0.9, 0.0, w_m, 1.0 - w_m), 0.0);
        }
        let expected = (0.8 * 0.25f64.ln()).exp();
        assert!((fused_score(0.25, 1.0, 0.8, 0.2) - expected).abs() < 1e-12);
        assert!((expected - 0.329877).abs() < 1e-6);
    }

    #[test]
    fn normalisation() {
        assert_eq!(normalize_objectness(&[2.0, 4.0, 3.0]), vec![0.0, 1.0, 0.5]);
        assert_eq!(normalize_objectness(&[0.3, 0.3]), vec![1.0, 1.0]);
    }

    #[test]
    fn no_input_boxes_zeroes_everything() {
        let c = [PseudoCandidate::new(corner(0.1, 0.1, 0.3, 0.3), 2.0)];
        let fused = fuse_scores(&c, &[], 0.8, 0.2);
        assert_eq!(fused[0].score, 0.0);
        assert!(select_pseudo_labels(&fused, &[], 5).is_empty());
    }

    fn scored(b: BoundingBox, s: f64) -> PseudoCandidate {
        PseudoCandidate {
            bbox: b,
            objectness: s,
            score: s,
        }
    }

    #[test]
    fn selection_examples() {
        let c = vec![
            scored(corner(0.0, 0.0, 0.1, 0.1), 0.5),
            scored(corner(0.3, 0.3, 0.4, 0.4), 0.6),
            scored(corner(0.6, 0.6, 0.7, 0.7), 0.7),
        ];
        assert_eq!(select_pseudo_labels(&c, &[], 5).len(), 3);

        let gt = [corner(0.3, 0.3, 0.4, 0.4)];
        assert_eq!(select_pseudo_indices(&c, &gt, 5), vec![2, 0]);

        // IOU of these two is 0.8
        let a = corner(0.0, 0.0, 1.0, 0.5);
        let b = corner(0.0, 0.0, 1.0, 0.4);
        assert!((iou(&a, &b) - 0.8).abs() < 1e-12);
        let dup = vec![scored(b, 0.7), scored(a, 0.9)];
        assert_eq!(select_pseudo_indices(&dup, &[], 5), vec![1]);
    }

    #[test]
    fn attention_scores() {
        let uniform = Tensor::full(&[4, 4], 0.3);
        let s = attention_driven_scores(&uniform, &[corner(0.0, 0.0, 1.0, 1.0), corner(0.2, 0.2, 0.7, 0.9)]);
        assert!(s.iter().all(|v| (v - 0.3).abs() < 1e-12));

        let mut data = vec![1.0; 16];
        for r in 0..4 {
            data[r * 4 + 2] = 5.0;
            data[r * 4 + 3] = 5.0;
        }
        let halves = Tensor::matrix(4, 4, data).unwrap();
        let s = attention_driven_scores(&halves, &[corner(0.5, 0.0, 1.0, 1.0), corner(0.0, 0.0, 1.0, 1.0)]);
        assert_eq!(s, vec![5.0, 3.0]);

        let s = attention_driven_scores(&halves, &[corner(0.375, 0.375, 0.375, 0.375), corner(0.01, 0.01, 0.05, 0.05)]);
        assert_eq!(s, vec![0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn monotone_in_both_factors(
            n1 in 0.0f64..1.0, n2 in 0.0f64..1.0, m in 0.0f64..1.0, w_m in 0.01f64..0.99
        ) {
            let (lo, hi) = if n1 <= n2 { (n1, n2) } else { (n2, n1) };
            prop_assert!(fused_score(lo, m, w_m, 1.0 - w_m) <= fused_score(hi, m, w_m, 1.0 - w_m));
            prop_assert!(fused_score(m, lo, w_m, 1.0 - w_m) <= fused_score(m, hi, w_m, 1.0 - w_m));
        }

        #[test]
        fn fused_scores_in_unit_interval(
            objs in prop::collection::vec(-3.0f64..3.0, 1..8), w_m in 0.01f64..0.99
        ) {
            let cands: Vec<_> = objs.iter().enumerate()
                .map(|(i, &o)| PseudoCandidate::new(corner(0.1 * i as f64 / 8.0, 0.1, 0.5, 0.6), o))
                .collect();
            let inputs = [corner(0.0, 0.0, 0.5, 0.5)];
            for c in fuse_scores(&cands, &inputs, w_m, 1.0 - w_m) {
                prop_assert!((0.0..=1.0).contains(&c.score));
            }
        }
    }
}
