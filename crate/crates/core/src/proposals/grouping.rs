//! Hierarchical grouping of an over-segmentation into nested regions.

use std::collections::{BTreeMap, BTreeSet};

use crate::geometry::BoundingBox;
use crate::raster::RasterImage;

use super::segment::LabelMap;

pub const COLOR_BINS: usize = 25;
pub const TEXTURE_ORIENTATIONS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub size: usize,
    /// Pixel bounds `(x1, y1, x2, y2)`, exclusive on the right/bottom edge.
    pub bounds: [usize; 4],
    /// HSV, `COLOR_BINS` per channel, L1-normalised.
    pub color_hist: Vec<f64>,
    /// Gradient magnitude per (channel, orientation), L1-normalised.
    pub texture_hist: Vec<f64>,
}

impl Region {
    pub fn bbox(&self) -> BoundingBox {
        let [x1, y1, x2, y2] = self.bounds;
        BoundingBox::from_corners(x1 as f64, y1 as f64, x2 as f64, y2 as f64)
    }

    fn bounds_area(&self) -> usize {
        (self.bounds[2] - self.bounds[0]) * (self.bounds[3] - self.bounds[1])
    }

    fn merged(&self, other: &Region) -> Region {
        let size = self.size + other.size;
        let (wa, wb) = (self.size as f64 / size as f64, other.size as f64 / size as f64);
        let mix = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect();
        Region {
            size,
            bounds: union_bounds(&self.bounds, &other.bounds),
            color_hist: mix(&self.color_hist, &other.color_hist),
            texture_hist: mix(&self.texture_hist, &other.texture_hist),
        }
    }
}

fn union_bounds(a: &[usize; 4], b: &[usize; 4]) -> [usize; 4] {
    [a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])]
}

fn hist_intersection(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.min(*y)).sum()
}

/// Colour + texture + size + fill, each weighted 1.
fn similarity(a: &Region, b: &Region, image_size: f64) -> f64 {
    let color = hist_intersection(&a.color_hist, &b.color_hist);
    let texture = hist_intersection(&a.texture_hist, &b.texture_hist);
    let joint = (a.size + b.size) as f64;
    let size = 1.0 - joint / image_size;
    let [x1, y1, x2, y2] = union_bounds(&a.bounds, &b.bounds);
    let fill = 1.0 - ((x2 - x1) * (y2 - y1)) as f64 / image_size + joint / image_size;
    color + texture + size + fill
}

/// HSV with all components in `[0, 1]`.
fn rgb_to_hsv(rgb: [u8; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(|c| c as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    } / 6.0;
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    [hue, sat, max]
}

fn bin(v: f64, bins: usize) -> usize {
    ((v * bins as f64) as usize).min(bins - 1)
}

fn normalise(h: &mut [f64]) {
    let s: f64 = h.iter().sum();
    if s > 0.0 {
        h.iter_mut().for_each(|v| *v /= s);
    } else {
        let u = 1.0 / h.len() as f64;
        h.iter_mut().for_each(|v| *v = u);
    }
}

/// Builds one `Region` per label of the segmentation.
pub fn initial_regions(labels: &LabelMap, img: &RasterImage) -> Vec<Region> {
    let (w, h) = (img.width(), img.height());
    let n = labels.num_regions;
    let mut regions: Vec<Region> = (0..n)
        .map(|_| Region {
            size: 0,
            bounds: [usize::MAX, usize::MAX, 0, 0],
            color_hist: vec![0.0; 3 * COLOR_BINS],
            texture_hist: vec![0.0; 3 * TEXTURE_ORIENTATIONS],
        })
        .collect();

    let chan = |x: usize, y: usize, c: usize| img.get(x, y)[c] as f64 / 255.0;
    for y in 0..h {
        for x in 0..w {
            let r = &mut regions[labels.label(x, y) as usize];
            r.size += 1;
            r.bounds[0] = r.bounds[0].min(x);
            r.bounds[1] = r.bounds[1].min(y);
            r.bounds[2] = r.bounds[2].max(x + 1);
            r.bounds[3] = r.bounds[3].max(y + 1);

            let hsv = rgb_to_hsv(img.get(x, y));
            for (c, v) in hsv.iter().enumerate() {
                r.color_hist[c * COLOR_BINS + bin(*v, COLOR_BINS)] += 1.0;
            }

            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            for c in 0..3 {
                let gx = chan(xr, y, c) - chan(xl, y, c);
                let gy = chan(x, yd, c) - chan(x, yu, c);
                let mag = (gx * gx + gy * gy).sqrt();
                if mag > 0.0 {
                    let angle = gy.atan2(gx).rem_euclid(std::f64::consts::TAU);
                    let o = bin(angle / std::f64::consts::TAU, TEXTURE_ORIENTATIONS);
                    r.texture_hist[c * TEXTURE_ORIENTATIONS + o] += mag;
                }
            }
        }
    }
    for r in &mut regions {
        normalise(&mut r.color_hist);
        normalise(&mut r.texture_hist);
    }
    regions
}

/// Every region created during grouping, in creation order, plus the merge
/// sequence (`merges[k]` produced region `initial + k`).
#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub initial: usize,
    pub regions: Vec<Region>,
    pub merges: Vec<(usize, usize)>,
}

impl Hierarchy {
    /// Live region count after each merge step.
    pub fn live_counts(&self) -> Vec<usize> {
        (0..=self.merges.len()).map(|k| self.initial - k).collect()
    }
}

fn adjacency(labels: &LabelMap) -> BTreeSet<(usize, usize)> {
    let mut pairs = BTreeSet::new();
    let (w, h) = (labels.width, labels.height);
    for y in 0..h {
        for x in 0..w {
            let a = labels.label(x, y) as usize;
            let mut add = |b: usize| {
                if a != b {
                    pairs.insert((a.min(b), a.max(b)));
                }
            };
            if x + 1 < w {
                add(labels.label(x + 1, y) as usize);
            }
            if y + 1 < h {
                add(labels.label(x, y + 1) as usize);
            }
        }
    }
    pairs
}

/// Greedily merges the most similar adjacent pair until no adjacent pairs
/// remain. Ties go to the lexicographically smallest pair of region ids.
pub fn group_regions(labels: &LabelMap, img: &RasterImage) -> Hierarchy {
    let image_size = (img.width() * img.height()) as f64;
    let mut regions = initial_regions(labels, img);
    let initial = regions.len();
    let mut sims: BTreeMap<(usize, usize), f64> = adjacency(labels)
        .into_iter()
        .map(|(a, b)| ((a, b), similarity(&regions[a], &regions[b], image_size)))
        .collect();
    let mut merges = Vec::new();

    loop {
        let mut best: Option<((usize, usize), f64)> = None;
        for (&pair, &s) in &sims {
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some((pair, s));
            }
        }
        let Some(((a, b), _)) = best else { break };

        let t = regions.len();
        let merged = regions[a].merged(&regions[b]);
        regions.push(merged);
        merges.push((a, b));

        let stale: Vec<(usize, usize)> = sims
            .keys()
            .filter(|(i, j)| *i == a || *i == b || *j == a || *j == b)
            .copied()
            .collect();
        let mut neighbours = BTreeSet::new();
        for (i, j) in stale {
            sims.remove(&(i, j));
            for k in [i, j] {
                if k != a && k != b {
                    neighbours.insert(k);
                }
            }
        }
        for n in neighbours {
            let s = similarity(&regions[n], &regions[t], image_size);
            sims.insert((n, t), s);
        }
    }

    Hierarchy {
        initial,
        regions,
        merges,
    }
}

/// Pixel-unit boxes of every region in the hierarchy with at least
/// `min_box_pixels` pixels, identical boxes emitted once.
pub fn hierarchical_group(labels: &LabelMap, img: &RasterImage, min_box_pixels: usize) -> Vec<BoundingBox> {
    let hierarchy = group_regions(labels, img);
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for r in &hierarchy.regions {
        if r.size >= min_box_pixels && seen.insert(r.bounds) {
            out.push(r.bbox());
        }
    }
    out
}

impl Region {
    /// Fraction of the bounding rectangle covered by the region.
    pub fn fill_ratio(&self) -> f64 {
        self.size as f64 / self.bounds_area() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proposals::segment::felzenszwalb_segment;

    fn two_regions() -> (LabelMap, RasterImage) {
        // left 6 columns red, right 4 columns blue, 10x5
        let mut img = RasterImage::filled(10, 5, [200, 0, 0]);
        let mut labels = vec![0u32; 50];
        for y in 0..5 {
            for x in 6..10 {
                img.set(x, y, [0, 0, 200]);
                labels[y * 10 + x] = 1;
            }
        }
        (
            LabelMap {
                width: 10,
                height: 5,
                labels,
                num_regions: 2,
            },
            img,
        )
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(rgb_to_hsv([255, 0, 0]), [0.0, 1.0, 1.0]);
        let g = rgb_to_hsv([0, 255, 0]);
        assert!((g[0] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(rgb_to_hsv([0, 0, 0]), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn histograms_are_normalised() {
        let (labels, img) = two_regions();
        for r in initial_regions(&labels, &img) {
            assert!((r.color_hist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((r.texture_hist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(r.size >= 1);
        }
    }

    #[test]
    fn single_region_gives_whole_image() {
        let img = RasterImage::filled(8, 6, [1, 2, 3]);
        let labels = felzenszwalb_segment(&img, 500.0, 0.9, 1);
        assert_eq!(
            hierarchical_group(&labels, &img, 1),
            vec![BoundingBox::from_corners(0.0, 0.0, 8.0, 6.0)]
        );
        assert!(hierarchical_group(&labels, &img, 49).is_empty());
    }

    #[test]
    fn two_region_trace() {
        let (labels, img) = two_regions();
        let h = group_regions(&labels, &img);
        assert_eq!(h.merges, vec![(0, 1)]);
        assert_eq!(h.regions.len(), 3);
        assert_eq!(h.regions[2].size, 50);
        assert_eq!(h.regions[2].bounds, [0, 0, 10, 5]);

        let boxes = hierarchical_group(&labels, &img, 1);
        assert_eq!(
            boxes,
            vec![
                BoundingBox::from_corners(0.0, 0.0, 6.0, 5.0),
                BoundingBox::from_corners(6.0, 0.0, 10.0, 5.0),
                BoundingBox::from_corners(0.0, 0.0, 10.0, 5.0),
            ]
        );
        // the 20-pixel blue region drops out at a 21-pixel floor
        assert_eq!(hierarchical_group(&labels, &img, 21).len(), 2);
    }

    #[test]
    fn fill_similarity_of_perfect_tiling() {
        let (labels, img) = two_regions();
        let regions = initial_regions(&labels, &img);
        let s = similarity(&regions[0], &regions[1], 50.0);
        // size term is 0, fill term is 1; colour histograms differ in H and V
        // bins only partly, texture is shared along the boundary
        assert!(s > 1.0 && s < 4.0);
        assert_eq!(regions[0].fill_ratio(), 1.0);
    }
}
