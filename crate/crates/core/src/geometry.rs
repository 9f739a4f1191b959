//! Axis-aligned boxes, overlap measures and greedy suppression.
//!
//! Boxes are stored in center-size form. Coordinates are normally
//! image-normalised to `[0, 1]`, but nothing here depends on the unit, so
//! the same type carries pixel boxes inside the proposal generator.

use std::cmp::Ordering;
use std::fmt;

use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize, Serializer};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    /// Negative extents are clamped to zero.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            cx,
            cy,
            w: w.max(0.0),
            h: h.max(0.0),
        }
    }

    /// Builds a box from corners; swapped corners are reordered.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        let (x1, x2) = if x1 <= x2 { (x1, x2) } else { (x2, x1) };
        let (y1, y2) = if y1 <= y2 { (y1, y2) } else { (y2, y1) };
        Self {
            cx: 0.5 * (x1 + x2),
            cy: 0.5 * (y1 + y2),
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    pub fn from_corner_array(c: [f64; 4]) -> Self {
        Self::from_corners(c[0], c[1], c[2], c[3])
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> [f64; 4] {
        let hw = 0.5 * self.w;
        let hh = 0.5 * self.h;
        [self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_degenerate(&self) -> bool {
        self.area() <= 0.0
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        let [x1, y1, x2, y2] = self.corners();
        x >= x1 && x <= x2 && y >= y1 && y <= y2
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self::new(self.cx * sx, self.cy * sy, self.w * sx, self.h * sy)
    }

    pub fn l1_distance(&self, other: &BoundingBox) -> f64 {
        (self.cx - other.cx).abs()
            + (self.cy - other.cy).abs()
            + (self.w - other.w).abs()
            + (self.h - other.h).abs()
    }

    pub fn within_unit_square(&self, tol: f64) -> bool {
        let [x1, y1, x2, y2] = self.corners();
        x1 >= -tol && y1 >= -tol && x2 <= 1.0 + tol && y2 <= 1.0 + tol
    }
}

fn intersection_area(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    iw * ih
}

/// Intersection over union. Two empty boxes have IOU 0.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ca, cb) = (a.corners(), b.corners());
    let inter = intersection_area(&ca, &cb);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Generalised IOU: IOU minus the fraction of the enclosing box not
/// covered by the union.
pub fn giou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ca, cb) = (a.corners(), b.corners());
    let inter = intersection_area(&ca, &cb);
    let union = a.area() + b.area() - inter;
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    let enclosure = (ca[2].max(cb[2]) - ca[0].min(cb[0])) * (ca[3].max(cb[3]) - ca[1].min(cb[1]));
    if enclosure <= 0.0 {
        return iou;
    }
    iou - (enclosure - union) / enclosure
}

/// A class label: one of the known ids, or the catch-all unknown class.
///
/// Serialised as the bare class id, or the string `"unknown"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Known(u32),
    Unknown,
}

impl Label {
    pub fn is_unknown(&self) -> bool {
        matches!(self, Label::Unknown)
    }

    pub fn known_id(&self) -> Option<u32> {
        match self {
            Label::Known(c) => Some(*c),
            Label::Unknown => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Known(c) => write!(f, "{c}"),
            Label::Unknown => f.write_str("unknown"),
        }
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Label::Known(c) => s.serialize_u32(*c),
            Label::Unknown => s.serialize_str("unknown"),
        }
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Id(u32),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Id(c) => Ok(Label::Known(c)),
            Raw::Name(s) if s == "unknown" => Ok(Label::Unknown),
            Raw::Name(s) => Err(de::Error::custom(format!("bad class label {s:?}"))),
        }
    }
}

/// Serde adapter writing a box as its `[x1, y1, x2, y2]` corners.
pub(crate) mod corner_format {
    use super::BoundingBox;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(b: &BoundingBox, s: S) -> Result<S::Ok, S::Error> {
        b.corners().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BoundingBox, D::Error> {
        let c = <[f64; 4]>::deserialize(d)?;
        if c[0] > c[2] || c[1] > c[3] {
            return Err(serde::de::Error::custom(format!("box corners out of order: {c:?}")));
        }
        Ok(BoundingBox::from_corner_array(c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box", with = "corner_format")]
    pub bbox: BoundingBox,
    pub label: Label,
    pub score: f64,
}

/// Descending score, ties by ascending index.
pub(crate) fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy non-maximum suppression over parallel box/score slices; returns
/// the kept indices in descending-score order.
pub fn nms_indices(boxes: &[BoundingBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    debug_assert_eq!(boxes.len(), scores.len());
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(scores) {
        if kept
            .iter()
            .all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold)
        {
            kept.push(i);
        }
    }
    kept
}

/// Class-agnostic greedy NMS.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let boxes: Vec<BoundingBox> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    nms_indices(&boxes, &scores, iou_threshold)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}
