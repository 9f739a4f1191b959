//! Graph-based over-segmentation (Felzenszwalb & Huttenlocher) on a
//! 4-connected pixel grid.

use crate::raster::RasterImage;

/// Per-pixel region ids, compacted to `0..num_regions` in raster order of
/// first appearance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub num_regions: usize,
}

impl LabelMap {
    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn region_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.num_regions];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }
}

struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Joins two roots; returns the surviving root.
    fn join(&mut self, a: usize, b: usize) -> usize {
        let (big, small) = if self.size[a] >= self.size[b] { (a, b) } else { (b, a) };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        big
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur per channel with edge replication; returns
/// interleaved RGB floats in 0..255.
pub(crate) fn smooth(img: &RasterImage, sigma: f64) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let src: Vec<f64> = img.pixels().iter().map(|&p| p as f64).collect();
    if sigma <= 0.0 {
        return src;
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;

    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = clamp(x as isize + ki as isize - r, w);
                    acc += kv * src[(y * w + sx) * 3 + c];
                }
                tmp[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = clamp(y as isize + ki as isize - r, h);
                    acc += kv * tmp[(sy * w + x) * 3 + c];
                }
                out[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    out
}

/// Segments `img` into regions. `scale` is the `k` of the threshold
/// function `τ(C) = k / |C|` in 0..255 colour units; components smaller than
/// `min_size` are merged into a neighbour afterwards. `sigma <= 0` skips the
/// pre-smoothing.
pub fn felzenszwalb_segment(img: &RasterImage, scale: f64, sigma: f64, min_size: usize) -> LabelMap {
    let (w, h) = (img.width(), img.height());
    let n = w * h;
    let smoothed = smooth(img, sigma);
    let dist = |a: usize, b: usize| {
        let mut s = 0.0;
        for c in 0..3 {
            let d = smoothed[a * 3 + c] - smoothed[b * 3 + c];
            s += d * d;
        }
        s.sqrt()
    };

    let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(2 * n);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w {
                edges.push((dist(p, p + 1), p, p + 1));
            }
            if y + 1 < h {
                edges.push((dist(p, p + w), p, p + w));
            }
        }
    }
    // stable: equal weights keep edge-index order
    edges.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut sets = DisjointSet::new(n);
    let mut threshold = vec![scale; n];
    for &(wgt, a, b) in &edges {
        let (ra, rb) = (sets.find(a), sets.find(b));
        if ra != rb && wgt <= threshold[ra] && wgt <= threshold[rb] {
            let root = sets.join(ra, rb);
            threshold[root] = wgt + scale / sets.size[root] as f64;
        }
    }
    for &(_, a, b) in &edges {
        let (ra, rb) = (sets.find(a), sets.find(b));
        if ra != rb && (sets.size[ra] < min_size || sets.size[rb] < min_size) {
            sets.join(ra, rb);
        }
    }

    let mut compact = vec![u32::MAX; n];
    let mut next = 0u32;
    let mut labels = Vec::with_capacity(n);
    for p in 0..n {
        let root = sets.find(p);
        if compact[root] == u32::MAX {
            compact[root] = next;
            next += 1;
        }
        labels.push(compact[root]);
    }
    LabelMap {
        width: w,
        height: h,
        labels,
        num_regions: next as usize,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn halves(w: usize, h: usize) -> RasterImage {
        let mut img = RasterImage::filled(w, h, [20, 20, 20]);
        for y in 0..h {
            for x in w / 2..w {
                img.set(x, y, [235, 235, 235]);
            }
        }
        img
    }

    #[test]
    fn uniform_image_is_one_region() {
        let img = RasterImage::filled(17, 9, [90, 120, 30]);
        let seg = felzenszwalb_segment(&img, 500.0, 0.9, 20);
        assert_eq!(seg.num_regions, 1);
        assert!(seg.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn two_half_planes_give_two_regions() {
        let img = halves(32, 32);
        let seg = felzenszwalb_segment(&img, 500.0, 0.0, 5);
        assert_eq!(seg.num_regions, 2);
        assert_ne!(seg.label(0, 0), seg.label(31, 31));
        assert_eq!(seg.label(0, 31), seg.label(0, 0));
    }

    #[test]
    fn blur_leaves_transition_columns_until_min_size_absorbs_them() {
        // Blurring the step produces columns 14..=17 whose mutual edges
        // exceed their own 500/32 threshold, so each survives as a strip.
        let img = halves(32, 32);
        let seg = felzenszwalb_segment(&img, 500.0, 0.9, 5);
        assert_eq!(seg.num_regions, 6);
        let seg = felzenszwalb_segment(&img, 500.0, 0.9, 40);
        assert_eq!(seg.num_regions, 2);
        assert_eq!(seg.label(15, 0), seg.label(0, 0));
        assert_eq!(seg.label(16, 0), seg.label(31, 0));
    }

    #[test]
    fn partition_and_min_size() {
        let mut img = halves(40, 30);
        for y in 5..9 {
            for x in 3..7 {
                img.set(x, y, [200, 10, 10]);
            }
        }
        let seg = felzenszwalb_segment(&img, 300.0, 0.8, 25);
        let sizes = seg.region_sizes();
        assert_eq!(sizes.iter().sum::<usize>(), 40 * 30);
        assert!(sizes.iter().all(|&s| s >= 25));
    }

    #[test]
    fn tiny_image_smaller_than_min_size() {
        let img = halves(4, 2);
        let seg = felzenszwalb_segment(&img, 500.0, 0.9, 200);
        assert_eq!(seg.num_regions, 1);
    }

    #[test]
    fn kernel_is_normalised() {
        let k = gaussian_kernel(0.9);
        assert_eq!(k.len(), 9);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
