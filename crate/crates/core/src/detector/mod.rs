//! Desk-scale detection transformer: patch embedder, self-attention encoder,
//! a shared query decoder run in coupled, fully decoupled or cascade
//! fashion, and regression / classification / objectness heads.

mod checkpoint;
mod gradcheck;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::raster::RasterImage;
use crate::tensor::Tensor;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{gradient_check, relative_error, GradCheckReport, Stencil};
pub use params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodingMode {
    /// One query set drives every head.
    Coupled,
    /// Independent location and class query sets.
    FullyDecoupled,
    /// Location embeddings become the class queries of a second pass through
    /// the same decoder.
    Cascade,
}

impl std::str::FromStr for DecodingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coupled" => Ok(Self::Coupled),
            "fully_decoupled" => Ok(Self::FullyDecoupled),
            "cascade" => Ok(Self::Cascade),
            other => Err(Error::Config(format!("unknown decoding mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub embed_dim: usize,
    pub num_queries: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub patch_size: usize,
    /// Square input side in pixels.
    pub image_size: usize,
    /// Known-class logit slots; slot `num_classes` is "unknown".
    pub num_classes: usize,
    pub ffn_dim: usize,
    pub mode: DecodingMode,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            num_queries: 10,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            patch_size: 8,
            image_size: 64,
            num_classes: 6,
            ffn_dim: 64,
            mode: DecodingMode::Cascade,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("embed_dim", self.embed_dim),
            ("num_queries", self.num_queries),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("heads", self.heads),
            ("patch_size", self.patch_size),
            ("image_size", self.image_size),
            ("num_classes", self.num_classes),
            ("ffn_dim", self.ffn_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("detector.{name} must be at least 1")));
            }
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Index of the unknown logit.
    pub fn unknown_index(&self) -> usize {
        self.num_classes
    }
}

/// Plain values read back from a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput {
    pub boxes: Vec<BoundingBox>,
    /// `[num_queries, num_classes + 1]`
    pub class_logits: Tensor,
    pub objectness: Vec<f64>,
}

/// Patch vectors, one row per token in raster order of the patch grid;
/// pixels scaled to `[-0.5, 0.5]`.
pub fn patchify(img: &RasterImage, patch: usize) -> Result<Tensor> {
    let (w, h) = (img.width(), img.height());
    if w % patch != 0 || h % patch != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{w}x{h} image is not divisible into {patch}x{patch} patches"
        )));
    }
    let (gw, gh) = (w / patch, h / patch);
    let mut data = Vec::with_capacity(w * h * 3);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..patch {
                for dx in 0..patch {
                    let rgb = img.get(px * patch + dx, py * patch + dy);
                    data.extend(rgb.iter().map(|&v| v as f64 / 255.0 - 0.5));
                }
            }
        }
    }
    Tensor::matrix(gw * gh, patch * patch * 3, data)
}

fn sinusoidal(rows: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * dim);
    for pos in 0..rows {
        for i in 0..dim {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = pos as f64 * freq;
            data.push(if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    Tensor::matrix(rows, dim, data).expect("positive dims")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    config: DetectorConfig,
    params: ParamStore,
}

impl Detector {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let mut p = ParamStore::new();
        let linear = |p: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| -> Result<()> {
            p.insert(format!("{name}.w"), Tensor::uniform(&[fan_in, fan_out], bound, rng))?;
            p.insert(format!("{name}.b"), Tensor::uniform(&[1, fan_out], bound, rng))
        };
        let norm = |p: &mut ParamStore, name: &str| -> Result<()> {
            p.insert(format!("{name}.gamma"), Tensor::full(&[1, d], 1.0))?;
            p.insert(format!("{name}.beta"), Tensor::zeros(&[1, d]))
        };

        linear(&mut p, "patch_embed", config.patch_dim(), d, &mut rng)?;
        p.insert("encoder.pos", sinusoidal(config.tokens(), d))?;
        for l in 0..config.encoder_layers {
            for proj in ["q", "k", "v", "o"] {
                linear(&mut p, &format!("encoder.{l}.attn.{proj}"), d, d, &mut rng)?;
            }
            norm(&mut p, &format!("encoder.{l}.norm1"))?;
            linear(&mut p, &format!("encoder.{l}.ffn.0"), d, config.ffn_dim, &mut rng)?;
            linear(&mut p, &format!("encoder.{l}.ffn.1"), config.ffn_dim, d, &mut rng)?;
            norm(&mut p, &format!("encoder.{l}.norm2"))?;
        }
        for l in 0..config.decoder_layers {
            for block in ["self_attn", "cross_attn"] {
                for proj in ["q", "k", "v", "o"] {
                    linear(&mut p, &format!("decoder.{l}.{block}.{proj}"), d, d, &mut rng)?;
                }
            }
            norm(&mut p, &format!("decoder.{l}.norm1"))?;
            norm(&mut p, &format!("decoder.{l}.norm2"))?;
            linear(&mut p, &format!("decoder.{l}.ffn.0"), d, config.ffn_dim, &mut rng)?;
            linear(&mut p, &format!("decoder.{l}.ffn.1"), config.ffn_dim, d, &mut rng)?;
            norm(&mut p, &format!("decoder.{l}.norm3"))?;
        }
        let m = config.num_queries;
        p.insert("query.pos", Tensor::uniform(&[m, d], bound, &mut rng))?;
        p.insert("query.location", Tensor::uniform(&[m, d], bound, &mut rng))?;
        if config.mode == DecodingMode::FullyDecoupled {
            p.insert("query.class", Tensor::uniform(&[m, d], bound, &mut rng))?;
        }
        linear(&mut p, "head.reg.0", d, d, &mut rng)?;
        linear(&mut p, "head.reg.1", d, d, &mut rng)?;
        linear(&mut p, "head.reg.2", d, 4, &mut rng)?;
        linear(&mut p, "head.cls", d, config.num_classes + 1, &mut rng)?;
        linear(&mut p, "head.obj", d, 1, &mut rng)?;
        Ok(Self { config, params: p })
    }

    pub fn from_parts(config: DetectorConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Self::new(config.clone(), 0)?;
        if reference.params.names() != params.names() {
            return Err(Error::ShapeMismatch("parameter names do not match the configuration".into()));
        }
        for ((name, a), b) in reference.params.iter().zip(params.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {name}: expected shape {:?}, got {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Records a full forward pass on a fresh tape.
    pub fn forward(&self, img: &RasterImage) -> Result<Pass> {
        let c = &self.config;
        if img.width() != c.image_size || img.height() != c.image_size {
            return Err(Error::ShapeMismatch(format!(
                "detector expects {0}x{0} images, got {1}x{2}",
                c.image_size,
                img.width(),
                img.height()
            )));
        }
        let patches = patchify(img, c.patch_size)?;
        let mut cx = Ctx::new(&self.params, c);
        let x = cx.g.tensor(&patches);
        let memory = cx.encode(x);
        let pos = cx.param("query.pos");
        let q_loc = cx.param("query.location");
        let e_location = cx.decode(memory, q_loc, pos);
        let e_class = match c.mode {
            DecodingMode::Coupled => e_location,
            DecodingMode::FullyDecoupled => {
                let q_cls = cx.param("query.class");
                cx.decode(memory, q_cls, pos)
            }
            DecodingMode::Cascade => cx.decode(memory, e_location, pos),
        };
        let h = cx.linear("head.reg.0", e_location);
        let h = cx.g.gelu(h);
        let h = cx.linear("head.reg.1", h);
        let h = cx.g.gelu(h);
        let h = cx.linear("head.reg.2", h);
        let boxes = cx.g.sigmoid(h);
        let class_logits = cx.linear("head.cls", e_class);
        let objectness = cx.linear("head.obj", e_class);
        Ok(Pass {
            grid: c.grid(),
            graph: cx.g,
            bound: cx.bound,
            memory,
            e_location,
            e_class,
            boxes,
            class_logits,
            objectness,
        })
    }

    /// Runs the shared decoder alone on caller-supplied inputs. Useful for
    /// structural checks; `memory` is `[tokens, D]`, `queries` and
    /// `query_pos` are `[M, D]` for any `M`.
    pub fn decode_only(&self, memory: &Tensor, queries: &Tensor, query_pos: &Tensor) -> Result<Tensor> {
        let d = self.config.embed_dim;
        if memory.cols() != d || queries.cols() != d || query_pos.cols() != d {
            return Err(Error::ShapeMismatch(format!("decoder inputs must have {d} columns")));
        }
        if memory.rows() != self.config.tokens() || queries.rows() != query_pos.rows() {
            return Err(Error::ShapeMismatch("decoder input row counts disagree".into()));
        }
        let mut cx = Ctx::new(&self.params, &self.config);
        let m = cx.g.tensor(memory);
        let q = cx.g.tensor(queries);
        let p = cx.g.tensor(query_pos);
        let out = cx.decode(m, q, p);
        Ok(cx.g.to_tensor(out))
    }
}

/// A recorded forward pass.
#[derive(Debug)]
pub struct Pass {
    pub graph: Graph,
    grid: usize,
    bound: Vec<Option<Var>>,
    pub memory: Var,
    pub e_location: Var,
    pub e_class: Var,
    /// `[M, 4]` centre-size boxes after the sigmoid.
    pub boxes: Var,
    pub class_logits: Var,
    /// `[M, 1]`
    pub objectness: Var,
}

impl Pass {
    pub fn output(&self) -> DetectorOutput {
        let boxes = self
            .graph
            .value(self.boxes)
            .chunks(4)
            .map(|b| BoundingBox::new(b[0], b[1], b[2], b[3]))
            .collect();
        DetectorOutput {
            boxes,
            class_logits: self.graph.to_tensor(self.class_logits),
            objectness: self.graph.value(self.objectness).to_vec(),
        }
    }

    /// Mean absolute encoder activation per token, on the patch grid.
    pub fn feature_map(&self) -> Tensor {
        let (_, d) = self.graph.shape(self.memory);
        let data = self
            .graph
            .value(self.memory)
            .chunks(d)
            .map(|row| row.iter().map(|v| v.abs()).sum::<f64>() / d as f64)
            .collect();
        Tensor::matrix(self.grid, self.grid, data).expect("grid shape")
    }

    /// Adds a scalar loss node whose local gradients with respect to the
    /// three head outputs are supplied by the caller.
    pub fn attach_loss(&mut self, value: f64, d_boxes: Vec<f64>, d_class: Vec<f64>, d_obj: Vec<f64>) -> Var {
        let inputs = vec![
            (self.boxes, d_boxes),
            (self.class_logits, d_class),
            (self.objectness, d_obj),
        ];
        self.graph.custom_scalar(value, inputs)
    }

    /// Gradient of `root` for every parameter, in store order; parameters
    /// the root does not depend on get zeros.
    pub fn param_grads(&self, params: &ParamStore, root: Var) -> Vec<Vec<f64>> {
        let mut grads = self.graph.backward(root);
        params
            .tensors()
            .iter()
            .zip(&self.bound)
            .map(|(t, v)| v.and_then(|v| grads.take(v)).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect()
    }
}

struct Ctx<'a> {
    g: Graph,
    params: &'a ParamStore,
    cfg: &'a DetectorConfig,
    bound: Vec<Option<Var>>,
}

impl<'a> Ctx<'a> {
    fn new(params: &'a ParamStore, cfg: &'a DetectorConfig) -> Self {
        Self {
            g: Graph::new(),
            params,
            cfg,
            bound: vec![None; params.len()],
        }
    }

    /// Each parameter becomes one leaf, shared by every use on this tape.
    fn param(&mut self, name: &str) -> Var {
        let i = self
            .params
            .position(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        if let Some(v) = self.bound[i] {
            return v;
        }
        let v = self.g.tensor(&self.params.tensors()[i]);
        self.bound[i] = Some(v);
        v
    }

    fn linear(&mut self, name: &str, x: Var) -> Var {
        let w = self.param(&format!("{name}.w"));
        let b = self.param(&format!("{name}.b"));
        let y = self.g.matmul(x, w);
        self.g.add_row(y, b)
    }

    fn norm(&mut self, name: &str, x: Var) -> Var {
        let gamma = self.param(&format!("{name}.gamma"));
        let beta = self.param(&format!("{name}.beta"));
        self.g.layer_norm(x, gamma, beta)
    }

    fn attention(&mut self, name: &str, q_in: Var, k_in: Var, v_in: Var) -> Var {
        let q = self.linear(&format!("{name}.q"), q_in);
        let k = self.linear(&format!("{name}.k"), k_in);
        let v = self.linear(&format!("{name}.v"), v_in);
        let heads = self.cfg.heads;
        let dh = self.cfg.embed_dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.g.slice_cols(q, h * dh, dh);
            let kh = self.g.slice_cols(k, h * dh, dh);
            let vh = self.g.slice_cols(v, h * dh, dh);
            let s = self.g.matmul_t(qh, kh);
            let s = self.g.scale(s, scale);
            let a = self.g.softmax_rows(s);
            outs.push(self.g.matmul(a, vh));
        }
        let cat = if heads == 1 { outs[0] } else { self.g.concat_cols(&outs) };
        self.linear(&format!("{name}.o"), cat)
    }

    fn ffn(&mut self, name: &str, x: Var) -> Var {
        let h = self.linear(&format!("{name}.0"), x);
        let h = self.g.gelu(h);
        self.linear(&format!("{name}.1"), h)
    }

    fn encode(&mut self, patches: Var) -> Var {
        let x = self.linear("patch_embed", patches);
        let pos = self.param("encoder.pos");
        let mut x = self.g.add(x, pos);
        for l in 0..self.cfg.encoder_layers {
            let qk = self.g.add(x, pos);
            let a = self.attention(&format!("encoder.{l}.attn"), qk, qk, x);
            let r = self.g.add(x, a);
            x = self.norm(&format!("encoder.{l}.norm1"), r);
            let f = self.ffn(&format!("encoder.{l}.ffn"), x);
            let r = self.g.add(x, f);
            x = self.norm(&format!("encoder.{l}.norm2"), r);
        }
        x
    }

    fn decode(&mut self, memory: Var, queries: Var, query_pos: Var) -> Var {
        let mem_pos = self.param("encoder.pos");
        let keys = self.g.add(memory, mem_pos);
        let mut x = queries;
        for l in 0..self.cfg.decoder_layers {
            let qk = self.g.add(x, query_pos);
            let a = self.attention(&format!("decoder.{l}.self_attn"), qk, qk, x);
            let r = self.g.add(x, a);
            x = self.norm(&format!("decoder.{l}.norm1"), r);
            let q = self.g.add(x, query_pos);
            let a = self.attention(&format!("decoder.{l}.cross_attn"), q, keys, memory);
            let r = self.g.add(x, a);
            x = self.norm(&format!("decoder.{l}.norm2"), r);
            let f = self.ffn(&format!("decoder.{l}.ffn"), x);
            let r = self.g.add(x, f);
            x = self.norm(&format!("decoder.{l}.norm3"), r);
        }
        x
    }
}
