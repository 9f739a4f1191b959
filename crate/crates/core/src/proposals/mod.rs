//! Input-driven pseudo-label candidates: single-strategy selective search.
//!
//! The image is over-segmented with a graph-based method, the segments are
//! grouped bottom-up by colour/texture/size/fill similarity, and the bounding
//! box of every region ever formed becomes a class-agnostic candidate.

mod grouping;
mod segment;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::raster::RasterImage;

pub use grouping::{group_regions, hierarchical_group, initial_regions, Hierarchy, Region};
pub use segment::{felzenszwalb_segment, LabelMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectiveSearchConfig {
    pub scale: f64,
    pub sigma: f64,
    pub min_size: usize,
    /// Regions with fewer pixels than this are not emitted.
    pub min_box_pixels: usize,
}

impl Default for SelectiveSearchConfig {
    fn default() -> Self {
        Self {
            scale: 500.0,
            sigma: 0.9,
            min_size: 200,
            min_box_pixels: 2000,
        }
    }
}

impl SelectiveSearchConfig {
    /// Scaled-down parameters for 64×64 shape-world images, where the
    /// defaults only ever return the whole-image box.
    pub fn desk() -> Self {
        Self {
            scale: 100.0,
            sigma: 0.9,
            min_size: 20,
            min_box_pixels: 40,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.sigma > 0.0 && self.min_size > 0 && self.min_box_pixels > 0) {
            return Err(Error::Config(format!(
                "selective search parameters must be strictly positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Candidate boxes in normalised image coordinates.
pub fn selective_search(img: &RasterImage, cfg: &SelectiveSearchConfig) -> Vec<BoundingBox> {
    let labels = felzenszwalb_segment(img, cfg.scale, cfg.sigma, cfg.min_size);
    let (sx, sy) = (1.0 / img.width() as f64, 1.0 / img.height() as f64);
    hierarchical_group(&labels, img, cfg.min_box_pixels)
        .into_iter()
        .map(|b| b.scaled(sx, sy))
        .collect()
}

/// One line of the proposal dump: boxes are normalised `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub image_id: u64,
    pub boxes: Vec<[f64; 4]>,
}

impl ProposalRecord {
    pub fn new(image_id: u64, boxes: &[BoundingBox]) -> Self {
        Self {
            image_id,
            boxes: boxes.iter().map(|b| b.corners()).collect(),
        }
    }

    pub fn bounding_boxes(&self) -> Vec<BoundingBox> {
        self.boxes.iter().map(|c| BoundingBox::from_corner_array(*c)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;

    fn square_on_ground() -> RasterImage {
        let mut img = RasterImage::filled(100, 100, [30, 60, 40]);
        for y in 20..80 {
            for x in 20..80 {
                img.set(x, y, [230, 200, 40]);
            }
        }
        img
    }

    #[test]
    fn small_uniform_image_yields_nothing() {
        let img = RasterImage::filled(10, 10, [128, 128, 128]);
        assert!(selective_search(&img, &SelectiveSearchConfig::default()).is_empty());
    }

    #[test]
    fn finds_the_square() {
        let img = square_on_ground();
        let boxes = selective_search(&img, &SelectiveSearchConfig::default());
        let truth = BoundingBox::from_corners(0.2, 0.2, 0.8, 0.8);
        let best = boxes.iter().map(|b| iou(b, &truth)).fold(0.0, f64::max);
        assert!(best >= 0.7, "best IOU {best}");
        assert!(boxes.iter().all(|b| b.within_unit_square(1e-12)));
        assert_eq!(boxes, selective_search(&img, &SelectiveSearchConfig::default()));
    }

    #[test]
    fn record_round_trip() {
        let b = BoundingBox::from_corners(0.1, 0.2, 0.5, 0.9);
        let rec = ProposalRecord::new(7, &[b]);
        let json = serde_json::to_string(&rec).unwrap();
        let back: ProposalRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back.image_id, 7);
        let bb = back.bounding_boxes()[0];
        assert!(iou(&bb, &b) > 1.0 - 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(SelectiveSearchConfig::default().validate().is_ok());
        let bad = SelectiveSearchConfig {
            sigma: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
