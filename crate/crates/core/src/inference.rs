//! Decoding detector outputs into labelled detections.

use crate::detector::{Detector, DetectorOutput};
use crate::error::Result;
use crate::geometry::{Detection, Label};
use crate::matching::sigmoid;
use crate::protocol::ClassRegistry;
use crate::raster::RasterImage;
use crate::train::active_columns;

/// One detection per query: the argmax over the active columns of the
/// softmax restricted to them, scored by that probability times the
/// objectness sigmoid. Only the `unknown_top_k` best unknown detections
/// are kept. Output is in descending score order.
pub fn decode(out: &DetectorOutput, reg: &ClassRegistry, unknown_column: usize, unknown_top_k: usize) -> Vec<Detection> {
    let columns = active_columns(reg, unknown_column);
    let mut dets = Vec::with_capacity(out.boxes.len());
    for (q, bbox) in out.boxes.iter().enumerate() {
        let logits: Vec<f64> = columns.iter().map(|&c| out.class_logits.at(q, c)).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        let mut best = 0;
        for k in 1..exp.len() {
            if exp[k] > exp[best] {
                best = k;
            }
        }
        let label = if columns[best] == unknown_column {
            Label::Unknown
        } else {
            Label::Known(columns[best] as u32)
        };
        dets.push(Detection {
            bbox: *bbox,
            label,
            score: exp[best] / z * sigmoid(out.objectness[q]),
        });
    }
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut unknown_seen = 0;
    dets.retain(|d| {
        if d.label.is_unknown() {
            unknown_seen += 1;
            unknown_seen <= unknown_top_k
        } else {
            true
        }
    });
    dets
}

pub fn predict(det: &Detector, img: &RasterImage, reg: &ClassRegistry, unknown_top_k: usize) -> Result<Vec<Detection>> {
    let out = det.forward(img)?.output();
    Ok(decode(&out, reg, det.config().unknown_index(), unknown_top_k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;
    use crate::protocol::TaskSpec;
    use crate::tensor::Tensor;

    fn output(logits: Vec<f64>, obj: Vec<f64>) -> DetectorOutput {
        let m = obj.len();
        DetectorOutput {
            boxes: (0..m).map(|i| BoundingBox::new(0.1 * i as f64 + 0.1, 0.5, 0.1, 0.1)).collect(),
            class_logits: Tensor::matrix(m, 7, logits).unwrap(),
            objectness: obj,
        }
    }

    #[test]
    fn inactive_columns_never_win() {
        let reg = ClassRegistry::new(&TaskSpec::shapeworld_default());
        // column 4 is huge but not yet known
        let out = output(vec![0.0, 1.0, 0.0, 0.0, 9.0, 0.0, 0.0], vec![0.0]);
        let d = decode(&out, &reg, 6, 5);
        assert_eq!(d[0].label, Label::Known(1));
        let e1 = 1f64.exp();
        assert!((d[0].score - e1 / (e1 + 3.0) * 0.5).abs() < 1e-12);
    }

    #[test]
    fn unknown_detections_capped_at_top_k() {
        let reg = ClassRegistry::new(&TaskSpec::shapeworld_default());
        let mut logits = Vec::new();
        let mut obj = Vec::new();
        for q in 0..8 {
            let mut row = vec![0.0; 7];
            row[if q < 6 { 6 } else { 0 }] = 3.0;
            logits.extend(row);
            obj.push(q as f64 * 0.1);
        }
        let d = decode(&output(logits, obj), &reg, 6, 5);
        assert_eq!(d.iter().filter(|d| d.label.is_unknown()).count(), 5);
        assert_eq!(d.len(), 7);
        assert!(d.windows(2).all(|w| w[0].score >= w[1].score));
        // the weakest unknown (query 0, lowest objectness) is the one dropped
        assert!(d.iter().all(|x| x.bbox != BoundingBox::new(0.1, 0.5, 0.1, 0.1)));
    }
}
