//! Synthetic detection corpus: saturated geometric shapes on a
//! low-saturation textured background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, Instance};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::raster::RasterImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Star,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Star,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
            ShapeKind::Ring => "ring",
            ShapeKind::Star => "star",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }

    fn color(&self) -> [u8; 3] {
        match self {
            ShapeKind::Circle => [220, 45, 45],
            ShapeKind::Square => [45, 190, 60],
            ShapeKind::Triangle => [50, 80, 225],
            ShapeKind::Cross => [230, 205, 40],
            ShapeKind::Ring => [205, 50, 200],
            ShapeKind::Star => [40, 200, 215],
        }
    }

    /// Whether the point `(u, v)`, in units of the shape's square frame
    /// `[0, 1]²`, is inside the shape.
    fn contains(&self, u: f64, v: f64) -> bool {
        let (x, y) = (u - 0.5, v - 0.5);
        match self {
            ShapeKind::Circle => x * x + y * y <= 0.25,
            ShapeKind::Square => true,
            ShapeKind::Triangle => v >= 0.0 && (x.abs() <= 0.5 * v),
            ShapeKind::Cross => x.abs() <= 1.0 / 6.0 || y.abs() <= 1.0 / 6.0,
            ShapeKind::Ring => {
                let r2 = x * x + y * y;
                (0.0625..=0.25).contains(&r2)
            }
            ShapeKind::Star => star_contains(x, y),
        }
    }
}

fn star_contains(x: f64, y: f64) -> bool {
    // five-pointed star, outer radius 0.5, inner 0.2, one point straight up
    let mut pts = Vec::with_capacity(10);
    for k in 0..10 {
        let r = if k % 2 == 0 { 0.5 } else { 0.2 };
        let a = -std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::PI / 5.0;
        pts.push((r * a.cos(), r * a.sin()));
    }
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let (xi, yi) = pts[i];
        let (xj, yj) = pts[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapeWorldConfig {
    pub classes: Vec<ShapeKind>,
    pub image_size: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Side of the square frame a shape is drawn in, in pixels.
    pub min_extent: usize,
    pub max_extent: usize,
    /// Minimum free pixels between two shape frames.
    pub margin: usize,
}

impl Default for ShapeWorldConfig {
    fn default() -> Self {
        Self {
            classes: ShapeKind::ALL.to_vec(),
            image_size: 64,
            min_instances: 1,
            max_instances: 4,
            min_extent: 12,
            max_extent: 26,
            margin: 2,
        }
    }
}

impl ShapeWorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("shape world needs at least one class".into()));
        }
        if !(1..=self.max_instances).contains(&self.min_instances) {
            return Err(Error::Config("instance range must satisfy 1 <= min <= max".into()));
        }
        if self.min_extent < 8 || self.min_extent > self.max_extent || self.max_extent > self.image_size {
            return Err(Error::Config("shape extents must satisfy 8 <= min <= max <= image_size".into()));
        }
        Ok(())
    }
}

/// Paints `kind` into the `extent`-sized frame at `(x0, y0)`; returns the
/// tight pixel bounds `[x1, y1, x2, y2)` of what was painted.
pub fn render_shape(
    img: &mut RasterImage,
    kind: ShapeKind,
    x0: usize,
    y0: usize,
    extent: usize,
    color: [u8; 3],
) -> Option<[usize; 4]> {
    let mut bounds: Option<[usize; 4]> = None;
    for dy in 0..extent {
        for dx in 0..extent {
            let (u, v) = ((dx as f64 + 0.5) / extent as f64, (dy as f64 + 0.5) / extent as f64);
            if !kind.contains(u, v) {
                continue;
            }
            let (x, y) = (x0 + dx, y0 + dy);
            if x >= img.width() || y >= img.height() {
                continue;
            }
            img.set(x, y, color);
            bounds = Some(match bounds {
                None => [x, y, x + 1, y + 1],
                Some([a, b, c, d]) => [a.min(x), b.min(y), c.max(x + 1), d.max(y + 1)],
            });
        }
    }
    bounds
}

fn render_one(cfg: &ShapeWorldConfig, seed: u64, index: u64) -> (RasterImage, Vec<Instance>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let size = cfg.image_size;
    let base: i32 = rng.gen_range(70..170);
    let tint: [i32; 3] = [rng.gen_range(-6..=6), rng.gen_range(-6..=6), rng.gen_range(-6..=6)];
    let mut img = RasterImage::filled(size, size, [0, 0, 0]);
    for y in 0..size {
        for x in 0..size {
            let n: i32 = rng.gen_range(-18..=18);
            let px = tint.map(|t| (base + t + n).clamp(0, 255) as u8);
            img.set(x, y, px);
        }
    }

    let wanted = rng.gen_range(cfg.min_instances..=cfg.max_instances);
    let mut frames: Vec<[usize; 4]> = Vec::new();
    let mut instances = Vec::new();
    let mut attempts = 0;
    while instances.len() < wanted && attempts < 200 {
        attempts += 1;
        let extent = rng.gen_range(cfg.min_extent..=cfg.max_extent);
        let x0 = rng.gen_range(0..=size - extent);
        let y0 = rng.gen_range(0..=size - extent);
        let frame = [x0, y0, x0 + extent, y0 + extent];
        let m = cfg.margin;
        let clear = frames
            .iter()
            .all(|f| frame[0] >= f[2] + m || f[0] >= frame[2] + m || frame[1] >= f[3] + m || f[1] >= frame[3] + m);
        if !clear {
            continue;
        }
        let class = rng.gen_range(0..cfg.classes.len());
        let kind = cfg.classes[class];
        let color = kind.color().map(|c| (c as i32 + rng.gen_range(-12..=12)).clamp(0, 255) as u8);
        if let Some([x1, y1, x2, y2]) = render_shape(&mut img, kind, x0, y0, extent, color) {
            frames.push(frame);
            let s = size as f64;
            instances.push(Instance {
                class: class as u32,
                bbox: BoundingBox::from_corners(x1 as f64 / s, y1 as f64 / s, x2 as f64 / s, y2 as f64 / s),
            });
        }
    }
    (img, instances)
}

/// `count` images with ids `first_id..`, deterministic for a seed. Image
/// paths are `images/<id>.ppm`.
pub fn generate_shapeworld(
    seed: u64,
    count: usize,
    first_id: u64,
    cfg: &ShapeWorldConfig,
) -> Result<Vec<(AnnotatedImage, RasterImage)>> {
    cfg.validate()?;
    Ok((0..count as u64)
        .into_par_iter()
        .map(|i| {
            let id = first_id + i;
            let (img, instances) = render_one(cfg, seed, id);
            let ann = AnnotatedImage {
                image_id: id,
                image_path: format!("images/{id:06}.ppm").into(),
                instances,
            };
            (ann, img)
        })
        .collect())
}
