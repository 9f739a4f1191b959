//! Gradient-descent training over the joint loss with the adaptive
//! pseudo-labelling controller in the loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::loss::{assign_targets, joint_loss, FocalParams, LossBreakdown};
use crate::matching::{match_predictions, CostWeights};
use crate::plm::{
    attention_driven_scores, fuse_scores, select_pseudo_labels, AdaptiveState, PseudoCandidate,
    UpdateRecord,
};
use crate::protocol::{visible_annotations, AnnotatedImage, ClassRegistry};
use crate::raster::RasterImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?} (expected sgd or adam)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Decoupled weight decay, Adam only.
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Global L2 gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub finetune_iterations: usize,
    pub finetune_lr_divisor: f64,
    pub exemplars_per_class: usize,
    /// Mint unknown pseudo-labels from unmatched queries.
    pub pseudo_labels: bool,
    pub pseudo_top_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            iterations: 2000,
            batch_size: 4,
            grad_clip: 1.0,
            finetune_iterations: 300,
            finetune_lr_divisor: 10.0,
            exemplars_per_class: 50,
            pseudo_labels: true,
            pseudo_top_k: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.finetune_lr_divisor > 0.0) {
            return Err(Error::Config("finetune LR divisor must be positive".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("gradient clip must be non-negative".into()));
        }
        Ok(())
    }

    pub fn finetune_learning_rate(&self) -> f64 {
        self.learning_rate / self.finetune_lr_divisor
    }
}

/// One training image with its precomputed input-driven proposals.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub annotation: AnnotatedImage,
    pub image: RasterImage,
    pub proposals: Vec<BoundingBox>,
}

/// Per-iteration loss log entry (batch means).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: usize,
    pub loss: LossBreakdown,
    pub pseudo_labels: usize,
    pub w_m: f64,
    pub w_i: f64,
}

pub const LOSS_HEADER: &str = "iteration,total,localization,identification,objectness,pseudo_labels,w_m,w_i";

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut out = String::from(LOSS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.iteration,
            r.loss.total,
            r.loss.localization,
            r.loss.identification,
            r.loss.objectness,
            r.pseudo_labels,
            r.w_m,
            r.w_i
        );
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub trace: Vec<UpdateRecord>,
    pub log: Vec<LossRow>,
}

impl TrainReport {
    /// Mean total loss over the first and last `window` iterations.
    pub fn loss_drop(&self, window: usize) -> Option<(f64, f64)> {
        let w = window.min(self.log.len());
        if w == 0 {
            return None;
        }
        let mean = |rows: &[LossRow]| rows.iter().map(|r| r.loss.total).sum::<f64>() / rows.len() as f64;
        Some((mean(&self.log[..w]), mean(&self.log[self.log.len() - w..])))
    }
}

/// Logit columns trained and decoded at the registry's task: every known
/// class plus the unknown column.
pub fn active_columns(reg: &ClassRegistry, unknown_column: usize) -> Vec<usize> {
    let mut cols: Vec<usize> = reg.known().iter().map(|&c| c as usize).collect();
    cols.push(unknown_column);
    cols
}

struct ImageGrad {
    loss: LossBreakdown,
    grads: Vec<Vec<f64>>,
    pseudo: usize,
}

fn image_gradient(
    det: &Detector,
    sample: &TrainSample,
    reg: &ClassRegistry,
    columns: &[usize],
    weights: (f64, f64),
    cfg: &TrainConfig,
) -> Result<Option<ImageGrad>> {
    let cost = CostWeights::default();
    let mut pass = det.forward(&sample.image)?;
    let pred = pass.output();
    let finite = pred.boxes.iter().flat_map(|b| b.to_array()).all(f64::is_finite)
        && pred.class_logits.data().iter().all(|v| v.is_finite())
        && pred.objectness.iter().all(|v| v.is_finite());
    if !finite {
        return Ok(None);
    }
    let known: Vec<(usize, BoundingBox)> = visible_annotations(&sample.annotation, reg)
        .iter()
        .map(|i| (i.class as usize, i.bbox))
        .collect();

    let pseudo = if cfg.pseudo_labels && cfg.pseudo_top_k > 0 {
        let matched = match_predictions(&pred, &known, &cost);
        let boxes: Vec<BoundingBox> = matched.unmatched_queries.iter().map(|&q| pred.boxes[q]).collect();
        if boxes.is_empty() {
            Vec::new()
        } else {
            let s_o = attention_driven_scores(&pass.feature_map(), &boxes);
            let cands: Vec<PseudoCandidate> =
                boxes.iter().zip(&s_o).map(|(b, s)| PseudoCandidate::new(*b, *s)).collect();
            let scored = fuse_scores(&cands, &sample.proposals, weights.0, weights.1);
            let gt: Vec<BoundingBox> = known.iter().map(|k| k.1).collect();
            select_pseudo_labels(&scored, &gt, cfg.pseudo_top_k)
        }
    } else {
        Vec::new()
    };

    let unknown = det.config().unknown_index();
    let (_, targets) = assign_targets(&pred, &known, &pseudo, unknown, &cost);
    let (loss, head) = joint_loss(&pred, &targets, columns, &cost, &FocalParams::default());
    let root = pass.attach_loss(loss.total, head.boxes, head.class_logits, head.objectness);
    let grads = pass.param_grads(det.params(), root);
    Ok(Some(ImageGrad {
        loss,
        grads,
        pseudo: pseudo.len(),
    }))
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone)]
struct Moments {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Moments {
    fn new(det: &Detector) -> Self {
        let zeros: Vec<Vec<f64>> = det.params().tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

fn apply_update(det: &mut Detector, grads: &[Vec<f64>], scale: f64, lr: f64, cfg: &TrainConfig, moments: &mut Moments) {
    match cfg.optimizer {
        OptimizerKind::Sgd => {
            for (t, g) in det.params_mut().tensors_mut().iter_mut().zip(grads) {
                for (v, d) in t.data_mut().iter_mut().zip(g) {
                    *v -= lr * scale * d;
                }
            }
        }
        OptimizerKind::Adam => {
            moments.t += 1;
            let c1 = 1.0 - cfg.beta1.powi(moments.t);
            let c2 = 1.0 - cfg.beta2.powi(moments.t);
            let tensors = det.params_mut().tensors_mut().iter_mut();
            for (((t, g), m), v) in tensors.zip(grads).zip(&mut moments.m).zip(&mut moments.v) {
                for (k, p) in t.data_mut().iter_mut().enumerate() {
                    let d = scale * g[k];
                    m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * d;
                    v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * d * d;
                    let step = (m[k] / c1) / ((v[k] / c2).sqrt() + 1e-8);
                    *p -= lr * (step + cfg.weight_decay * *p);
                }
            }
        }
    }
}

/// Runs `iterations` optimizer steps at rate `lr` on batches drawn from
/// `samples` (reshuffled every pass), stepping `controller` once per
/// iteration with the batch-mean joint loss.
pub fn train(
    det: &mut Detector,
    samples: &[TrainSample],
    reg: &ClassRegistry,
    cfg: &TrainConfig,
    controller: &mut AdaptiveState,
    lr: f64,
    iterations: usize,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let columns = active_columns(reg, det.config().unknown_index());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut report = TrainReport::default();
    let mut moments = Moments::new(det);

    for it in 0..iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(samples.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let weights = controller.weights();
        let per_image: Option<Vec<ImageGrad>> = batch
            .par_iter()
            .map(|&i| image_gradient(det, &samples[i], reg, &columns, weights, cfg))
            .collect::<Result<_>>()?;
        let per_image = per_image.ok_or(Error::Divergence {
            iteration: it,
            loss: f64::NAN,
        })?;

        // ordered reduction keeps runs bit-reproducible
        let scale = 1.0 / per_image.len() as f64;
        let mut grads: Vec<Vec<f64>> = det.params().tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        let mut loss = LossBreakdown::default();
        let mut pseudo = 0;
        for g in &per_image {
            for (acc, part) in grads.iter_mut().zip(&g.grads) {
                for (a, p) in acc.iter_mut().zip(part) {
                    *a += scale * p;
                }
            }
            loss.localization += scale * g.loss.localization;
            loss.identification += scale * g.loss.identification;
            loss.objectness += scale * g.loss.objectness;
            loss.total += scale * g.loss.total;
            pseudo += g.pseudo;
        }

        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if !loss.total.is_finite() || !norm.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                loss: loss.total,
            });
        }
        let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            cfg.grad_clip / norm
        } else {
            1.0
        };
        apply_update(det, &grads, clip, lr, cfg, &mut moments);

        let (w_m, w_i) = controller.weights();
        report.log.push(LossRow {
            iteration: it,
            loss,
            pseudo_labels: pseudo,
            w_m,
            w_i,
        });
        if let Some(rec) = controller.step(loss.total) {
            log::debug!(
                "iteration {}: delta_l {:.4} -> weights ({:.4}, {:.4})",
                rec.iteration,
                rec.delta_l,
                rec.w_m,
                rec.w_i
            );
            report.trace.push(rec);
        }
        if it % 100 == 0 {
            log::info!("iteration {it}: loss {:.4} pseudo {pseudo}", loss.total);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{DecodingMode, DetectorConfig};
    use crate::plm::AdaptiveConfig;
    use crate::protocol::{generate_shapeworld, ShapeWorldConfig, TaskSpec};

    fn tiny_config(mode: DecodingMode) -> DetectorConfig {
        DetectorConfig {
            embed_dim: 8,
            num_queries: 4,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            patch_size: 8,
            image_size: 32,
            num_classes: 6,
            ffn_dim: 16,
            mode,
        }
    }

    fn samples(n: usize) -> Vec<TrainSample> {
        let cfg = ShapeWorldConfig {
            image_size: 32,
            min_extent: 8,
            max_extent: 14,
            max_instances: 2,
            ..Default::default()
        };
        generate_shapeworld(3, n, 0, &cfg)
            .unwrap()
            .into_iter()
            .map(|(annotation, image)| TrainSample {
                proposals: annotation.instances.iter().map(|i| i.bbox).collect(),
                annotation,
                image,
            })
            .collect()
    }

    #[test]
    fn training_is_reproducible_and_logs_every_iteration() {
        let data = samples(6);
        let reg = ClassRegistry::new(&TaskSpec::shapeworld_default());
        let cfg = TrainConfig {
            batch_size: 2,
            ..Default::default()
        };
        let adaptive = AdaptiveConfig {
            recent: 2,
            total: 4,
            cycle: 3,
            ..Default::default()
        };
        let run = || {
            let mut det = Detector::new(tiny_config(DecodingMode::Cascade), 1).unwrap();
            let mut ctl = AdaptiveState::new(&adaptive).unwrap();
            let rep = train(&mut det, &data, &reg, &cfg, &mut ctl, 0.05, 12, 9).unwrap();
            (det.params().tensors().to_vec(), rep)
        };
        let (pa, ra) = run();
        let (pb, rb) = run();
        assert_eq!(pa, pb);
        assert_eq!(ra.log, rb.log);
        assert_eq!(ra.log.len(), 12);
        assert!(ra.trace.iter().all(|r| r.iteration > 4 && r.iteration % 3 == 0));
        assert_eq!(ra.trace.len(), 2);
    }

    #[test]
    fn pseudo_labels_off_means_none_minted() {
        let data = samples(4);
        let reg = ClassRegistry::new(&TaskSpec::shapeworld_default());
        let cfg = TrainConfig {
            pseudo_labels: false,
            batch_size: 2,
            ..Default::default()
        };
        let mut det = Detector::new(tiny_config(DecodingMode::Coupled), 2).unwrap();
        let mut ctl = AdaptiveState::new(&AdaptiveConfig::default()).unwrap();
        let rep = train(&mut det, &data, &reg, &cfg, &mut ctl, 0.05, 5, 0).unwrap();
        assert!(rep.log.iter().all(|r| r.pseudo_labels == 0));
    }

    #[test]
    fn huge_step_trips_divergence_guard() {
        let data = samples(2);
        let reg = ClassRegistry::new(&TaskSpec::shapeworld_default());
        let cfg = TrainConfig {
            grad_clip: 0.0,
            batch_size: 2,
            ..Default::default()
        };
        let mut det = Detector::new(tiny_config(DecodingMode::Coupled), 2).unwrap();
        let mut ctl = AdaptiveState::new(&AdaptiveConfig::default()).unwrap();
        let err = train(&mut det, &data, &reg, &cfg, &mut ctl, 1e300, 50, 0).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn active_columns_cover_known_and_unknown() {
        let spec = TaskSpec::shapeworld_default();
        let reg = ClassRegistry::at_task(&spec, 1).unwrap();
        assert_eq!(active_columns(&reg, 6), vec![0, 1, 2, 3, 6]);
    }
}
