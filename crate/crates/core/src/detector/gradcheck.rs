//! Central finite-difference check of the tape gradients through the whole
//! detector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Detector, Pass};
use crate::error::Result;
use crate::raster::RasterImage;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, error O(h²).
    ThreePoint,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, error O(h⁴).
    FivePoint,
}

/// `|a − n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

struct Objective {
    boxes: Vec<f64>,
    class: Vec<f64>,
    obj: Vec<f64>,
}

impl Objective {
    fn eval(&self, pass: &Pass) -> f64 {
        let dot = |v: &[f64], w: &[f64]| v.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
        dot(pass.graph.value(pass.boxes), &self.boxes)
            + dot(pass.graph.value(pass.class_logits), &self.class)
            + dot(pass.graph.value(pass.objectness), &self.obj)
    }
}

/// Compares the gradient of a fixed random linear functional of all head
/// outputs against central differences with step `h`, for every scalar
/// parameter.
pub fn gradient_check(
    det: &Detector,
    img: &RasterImage,
    stencil: Stencil,
    h: f64,
    floor: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let m = det.config().num_queries;
    let cols = det.config().num_classes + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let objective = Objective {
        boxes: draw(m * 4),
        class: draw(m * cols),
        obj: draw(m),
    };

    let mut pass = det.forward(img)?;
    let root = pass.attach_loss(
        objective.eval(&pass),
        objective.boxes.clone(),
        objective.class.clone(),
        objective.obj.clone(),
    );
    let analytic = pass.param_grads(det.params(), root);

    let mut probe = det.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
    };
    for (pi, name) in det.params().names().iter().enumerate() {
        for k in 0..det.params().tensors()[pi].len() {
            let orig = det.params().tensors()[pi].data()[k];
            let mut at = |offset: f64| -> Result<f64> {
                probe.params_mut().tensors_mut()[pi].data_mut()[k] = orig + offset;
                let v = objective.eval(&probe.forward(img)?);
                probe.params_mut().tensors_mut()[pi].data_mut()[k] = orig;
                Ok(v)
            };
            let numeric = match stencil {
                Stencil::ThreePoint => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::FivePoint => (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h),
            };
            let err = relative_error(analytic[pi][k], numeric, floor);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = k;
            }
        }
    }
    Ok(report)
}
