//! Operator commands behind the `owodlab` binary. Every artifact lands under
//! the run's output directory:
//!
//! ```text
//! <output>/config.toml        resolved configuration
//! <output>/manifest.json      inputs, outputs, config hash and seed per command
//! <output>/state.json         last trained task
//! <output>/data/              images/, train.jsonl, test.jsonl, proposals.jsonl
//! <output>/task_<n>/          checkpoint.bin, registry.json, trace.csv, loss.csv,
//!                             exemplars/, metrics.{json,txt}, detections.jsonl, *.svg
//! ```

pub mod config;
pub mod plot;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::RunConfig;

use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::geometry::Detection;
use crate::inference::predict;
use crate::jsonl;
use crate::metrics::{assemble_report, EvalRecord, MetricsReport};
use crate::plm::{trace_csv, AdaptiveState, UpdateRecord};
use crate::proposals::{selective_search, ProposalRecord};
use crate::protocol::{generate_shapeworld, AnnotatedImage, ClassRegistry, ExemplarStore};
use crate::train::{loss_csv, train, TrainReport, TrainSample};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const PROPOSALS_FILE: &str = "proposals.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const STATE_FILE: &str = "state.json";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CommandRecord {
    pub config_sha256: String,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub seed: u64,
    pub commands: BTreeMap<String, CommandRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub task: usize,
    pub checkpoint: String,
}

/// One line of `detections.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub image_id: u64,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub task: usize,
    pub train: TrainReport,
    pub finetune: Option<TrainReport>,
    pub finetune_images: usize,
    pub registry: ClassRegistry,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Data(format!("{} is missing; run `owodlab {hint}` first", path.display())))
    }
}

/// A configured run rooted at its output directory.
pub struct Run {
    cfg: RunConfig,
}

impl Run {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn output_dir(&self) -> &Path {
        &self.cfg.run.output_dir
    }

    pub fn data_root(&self) -> PathBuf {
        self.cfg.data_root()
    }

    pub fn task_dir(&self, task: usize) -> PathBuf {
        self.output_dir().join(format!("task_{task}"))
    }

    fn display(&self, path: &Path) -> String {
        path.strip_prefix(self.output_dir())
            .unwrap_or(path)
            .display()
            .to_string()
    }

    fn check_task(&self, task: usize) -> Result<()> {
        let n = self.cfg.tasks.tasks.len();
        if task == 0 || task > n {
            return Err(Error::Config(format!("task must lie in 1..={n}, got {task}")));
        }
        Ok(())
    }

    fn record(&self, name: &str, inputs: &[&Path], outputs: &[&Path]) -> Result<()> {
        let path = self.output_dir().join(MANIFEST_FILE);
        let mut manifest: Manifest = if path.exists() {
            read_json(&path)?
        } else {
            Manifest::default()
        };
        let sha = self.cfg.sha256();
        manifest.config_sha256 = sha.clone();
        manifest.seed = self.cfg.run.seed;
        manifest.commands.insert(
            name.to_string(),
            CommandRecord {
                config_sha256: sha,
                seed: self.cfg.run.seed,
                inputs: inputs.iter().map(|p| self.display(p)).collect(),
                outputs: outputs.iter().map(|p| self.display(p)).collect(),
            },
        );
        write_text(&self.output_dir().join("config.toml"), &self.cfg.to_toml())?;
        write_json(&path, &manifest)
    }

    pub fn manifest(&self) -> Result<Manifest> {
        read_json(&self.output_dir().join(MANIFEST_FILE))
    }

    pub fn state(&self) -> Result<RunState> {
        let path = self.output_dir().join(STATE_FILE);
        require(&path, "train --task 1")?;
        read_json(&path)
    }

    /// Writes the shape-world images and the train/test annotation files.
    pub fn generate(&self) -> Result<()> {
        let root = self.data_root();
        let shapes = self.cfg.shapeworld()?;
        let seed = self.cfg.run.seed;
        let n_train = self.cfg.data.train_images;
        let train = generate_shapeworld(seed, n_train, 0, &shapes)?;
        let test = generate_shapeworld(seed, self.cfg.data.test_images, n_train as u64, &shapes)?;
        train
            .par_iter()
            .chain(test.par_iter())
            .try_for_each(|(ann, img)| {
                let path = root.join(&ann.image_path);
                if let Some(dir) = path.parent() {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                img.write_ppm(&path)
            })?;
        let ann = |set: &[(AnnotatedImage, _)]| set.iter().map(|(a, _)| a.clone()).collect::<Vec<_>>();
        let (train_path, test_path) = (root.join(TRAIN_FILE), root.join(TEST_FILE));
        jsonl::write(&train_path, &ann(&train))?;
        jsonl::write(&test_path, &ann(&test))?;
        info!("wrote {} train and {} test images to {}", train.len(), test.len(), root.display());
        self.record("generate", &[], &[&root.join("images"), &train_path, &test_path])
    }

    fn annotations(&self, file: &str) -> Result<Vec<AnnotatedImage>> {
        let path = self.data_root().join(file);
        require(&path, "generate")?;
        let anns: Vec<AnnotatedImage> = jsonl::read(&path)?;
        let k = self.cfg.tasks.num_classes();
        for a in &anns {
            a.validate(k)?;
        }
        Ok(anns)
    }

    /// Selective-search candidates for every training image.
    pub fn proposals(&self) -> Result<usize> {
        let root = self.data_root();
        let anns = self.annotations(TRAIN_FILE)?;
        let ss = self.cfg.proposals;
        let records: Vec<ProposalRecord> = anns
            .par_iter()
            .map(|a| {
                let img = a.load_image(&root)?;
                Ok(ProposalRecord::new(a.image_id, &selective_search(&img, &ss)))
            })
            .collect::<Result<_>>()?;
        let path = root.join(PROPOSALS_FILE);
        jsonl::write(&path, &records)?;
        let total: usize = records.iter().map(|r| r.boxes.len()).sum();
        info!("{} proposals over {} images", total, records.len());
        self.record("proposals", &[&root.join(TRAIN_FILE)], &[&path])?;
        Ok(records.len())
    }

    fn load_samples(&self, anns: Vec<AnnotatedImage>, proposals: &HashMap<u64, ProposalRecord>) -> Result<Vec<TrainSample>> {
        let root = self.data_root();
        anns.into_par_iter()
            .map(|annotation| {
                let rec = proposals.get(&annotation.image_id).ok_or_else(|| {
                    Error::Data(format!("no proposals for image {}", annotation.image_id))
                })?;
                Ok(TrainSample {
                    image: annotation.load_image(&root)?,
                    proposals: rec.bounding_boxes(),
                    annotation,
                })
            })
            .collect()
    }

    fn proposal_index(&self) -> Result<HashMap<u64, ProposalRecord>> {
        let path = self.data_root().join(PROPOSALS_FILE);
        require(&path, "proposals")?;
        let records: Vec<ProposalRecord> = jsonl::read(&path)?;
        Ok(records.into_iter().map(|r| (r.image_id, r)).collect())
    }

    /// Training images for `task`: those showing a class the task
    /// introduces, labelled with those classes only.
    fn task_images(&self, anns: &[AnnotatedImage], reg: &ClassRegistry) -> Vec<AnnotatedImage> {
        let current = reg.current();
        anns.iter()
            .filter_map(|a| {
                let instances: Vec<_> = a.instances.iter().filter(|i| current.contains(&i.class)).copied().collect();
                (!instances.is_empty()).then(|| AnnotatedImage {
                    instances,
                    ..a.clone()
                })
            })
            .collect()
    }

    fn write_logs(&self, dir: &Path, prefix: &str, report: &TrainReport) -> Result<()> {
        write_text(&dir.join(format!("{prefix}trace.csv")), &trace_csv(&report.trace))?;
        write_text(&dir.join(format!("{prefix}loss.csv")), &loss_csv(&report.log))
    }

    /// Trains `task` on its class group, starting from the previous task's
    /// checkpoint when one exists, then updates the exemplar store. With
    /// `finetune`, also replays the exemplar set at the reduced rate.
    fn run_task(&self, task: usize, finetune: bool) -> Result<TaskOutcome> {
        self.check_task(task)?;
        let spec = &self.cfg.tasks;
        let reg = ClassRegistry::at_task(spec, task - 1)?;
        let dir = self.task_dir(task);
        let prev_dir = (task > 1).then(|| self.task_dir(task - 1));
        let prev_ckpt = prev_dir.as_ref().map(|d| d.join(CHECKPOINT_FILE));

        let mut det = match &prev_ckpt {
            Some(p) if p.exists() => {
                let det = Detector::load(p)?;
                if det.config() != &self.cfg.detector {
                    return Err(Error::Config(format!(
                        "{} was trained with a different detector configuration",
                        p.display()
                    )));
                }
                info!("task {task}: starting from {}", p.display());
                det
            }
            Some(p) if finetune => {
                return Err(Error::Data(format!(
                    "{} is missing; train task {} first",
                    p.display(),
                    task - 1
                )))
            }
            _ => Detector::new(self.cfg.detector.clone(), self.cfg.run.seed)?,
        };

        let index = self.proposal_index()?;
        let all = self.annotations(TRAIN_FILE)?;
        let images = self.task_images(&all, &reg);
        info!("task {task}: {} training images for classes {:?}", images.len(), reg.current());
        let samples = self.load_samples(images.clone(), &index)?;

        let tc = &self.cfg.train;
        let seed = self.cfg.run.seed + task as u64;
        let mut controller = AdaptiveState::new(&self.cfg.plm)?;
        let report = train(&mut det, &samples, &reg, tc, &mut controller, tc.learning_rate, tc.iterations, seed)?;

        let ex_prev = prev_dir.as_ref().map(|d| d.join("exemplars"));
        let mut store = match &ex_prev {
            Some(p) if p.join(crate::protocol::EXEMPLAR_INDEX_FILE).exists() => ExemplarStore::load(p)?,
            _ => ExemplarStore::new(tc.exemplars_per_class),
        };
        for a in &images {
            store.offer(a, &reg);
        }

        let mut finetune_report = None;
        let mut finetune_images = 0;
        if finetune {
            let by_id: HashMap<u64, &AnnotatedImage> = all.iter().map(|a| (a.image_id, a)).collect();
            // exemplars are replayed with every label known at this task
            let set: Vec<AnnotatedImage> = store
                .build_finetune_set()
                .iter()
                .map(|e| by_id.get(&e.image_id).map(|a| (*a).clone()).unwrap_or_else(|| e.clone()))
                .collect();
            finetune_images = set.len();
            let ft_samples = self.load_samples(set, &index)?;
            let mut ft_controller = AdaptiveState::new(&self.cfg.plm)?;
            info!("task {task}: finetuning on {finetune_images} exemplar images");
            let ft = train(
                &mut det,
                &ft_samples,
                &reg,
                tc,
                &mut ft_controller,
                tc.finetune_learning_rate(),
                tc.finetune_iterations,
                seed.wrapping_mul(31).wrapping_add(17),
            )?;
            self.write_logs(&dir, "finetune_", &ft)?;
            finetune_report = Some(ft);
        }

        let ckpt = dir.join(CHECKPOINT_FILE);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        det.save(&ckpt)?;
        write_json(&dir.join("registry.json"), &reg)?;
        self.write_logs(&dir, "", &report)?;
        store.save(&dir.join("exemplars"))?;
        write_json(
            &self.output_dir().join(STATE_FILE),
            &RunState {
                task,
                checkpoint: self.display(&ckpt),
            },
        )?;

        let data = self.data_root();
        let mut inputs: Vec<PathBuf> = vec![data.join(TRAIN_FILE), data.join(PROPOSALS_FILE)];
        inputs.extend(prev_ckpt.filter(|p| p.exists()));
        let mut outputs = vec![ckpt, dir.join("registry.json"), dir.join("trace.csv"), dir.join("loss.csv"), dir.join("exemplars")];
        if finetune {
            outputs.push(dir.join("finetune_trace.csv"));
            outputs.push(dir.join("finetune_loss.csv"));
        }
        let ins: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
        let outs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
        let name = if finetune { format!("advance_task_{task}") } else { format!("train_task_{task}") };
        self.record(&name, &ins, &outs)?;

        Ok(TaskOutcome {
            task,
            train: report,
            finetune: finetune_report,
            finetune_images,
            registry: reg,
        })
    }

    /// Trains one task (1-based) without exemplar finetuning.
    pub fn train_task(&self, task: usize) -> Result<TaskOutcome> {
        self.run_task(task, false)
    }

    /// Moves to the task after the last trained one: trains it from the
    /// previous checkpoint, then finetunes on the exemplar set.
    pub fn advance(&self) -> Result<TaskOutcome> {
        let state = self.state()?;
        let mut reg = ClassRegistry::at_task(&self.cfg.tasks, state.task - 1)?;
        reg.advance_task(&self.cfg.tasks)?;
        self.run_task(reg.task() + 1, true)
    }

    /// Scores the test split with the task's checkpoint.
    pub fn eval(&self, task: usize) -> Result<MetricsReport> {
        self.check_task(task)?;
        let dir = self.task_dir(task);
        let ckpt = dir.join(CHECKPOINT_FILE);
        require(&ckpt, &format!("train --task {task}"))?;
        let det = Detector::load(&ckpt)?;
        let reg = ClassRegistry::at_task(&self.cfg.tasks, task - 1)?;
        let root = self.data_root();
        let test = self.annotations(TEST_FILE)?;
        let k = self.cfg.eval.unknown_top_k;
        let records: Vec<EvalRecord> = test
            .par_iter()
            .map(|a| {
                let img = a.load_image(&root)?;
                Ok(EvalRecord::new(a.image_id, predict(&det, &img, &reg, k)?, a.instances.clone()))
            })
            .collect::<Result<_>>()?;
        let report = assemble_report(&records, &reg, &self.cfg.tasks, self.cfg.eval.wi_recall);

        let dets: Vec<ImageDetections> = records
            .iter()
            .map(|r| ImageDetections {
                image_id: r.image_id,
                detections: r.detections.clone(),
            })
            .collect();
        let (json, txt, dj) = (dir.join("metrics.json"), dir.join("metrics.txt"), dir.join("detections.jsonl"));
        write_json(&json, &report)?;
        write_text(&txt, &report.to_table())?;
        jsonl::write(&dj, &dets)?;
        self.record(&format!("eval_task_{task}"), &[&ckpt, &root.join(TEST_FILE)], &[&json, &txt, &dj])?;
        Ok(report)
    }

    /// Renders the task's weight trace and loss curves as SVG.
    pub fn plot(&self, task: usize) -> Result<Vec<PathBuf>> {
        self.check_task(task)?;
        let dir = self.task_dir(task);
        let mut written = Vec::new();
        let mut inputs = Vec::new();
        for prefix in ["", "finetune_"] {
            let trace_path = dir.join(format!("{prefix}trace.csv"));
            let loss_path = dir.join(format!("{prefix}loss.csv"));
            if prefix.is_empty() {
                require(&loss_path, &format!("train --task {task}"))?;
            } else if !loss_path.exists() {
                continue;
            }
            let trace = read_csv(&trace_path)?;
            let loss = read_csv(&loss_path)?;
            let col = |rows: &[Vec<f64>], c: usize| rows.iter().map(|r| (r[0], r[c])).collect::<Vec<_>>();

            // weights are piecewise constant between update cycles
            let last = loss.last().map_or(0.0, |r| r[0]);
            let steps = |init: f64, c: usize| {
                let mut pts = vec![(0.0, init)];
                let mut cur = init;
                for r in &trace {
                    pts.push((r[0], cur));
                    cur = r[c];
                    pts.push((r[0], cur));
                }
                pts.push((last.max(pts[pts.len() - 1].0), cur));
                pts
            };
            let (w_m, w_i) = self.cfg.plm.initial_weights;
            let (wm, wi) = (steps(w_m, 4), steps(w_i, 5));
            let trace_svg = plot::line_chart(
                &format!("Task {task} {}pseudo-label weights", prefix.replace('_', " ")),
                "iteration",
                "weight",
                &[plot::Series::new("W_m (model)", wm), plot::Series::new("W_I (input)", wi)],
            );
            let window = (loss.len() / 50).max(1);
            let names = ["total", "localization", "identification", "objectness"];
            let series: Vec<plot::Series> = names
                .iter()
                .enumerate()
                .map(|(i, n)| plot::Series::new(*n, plot::smooth(&col(&loss, i + 1), window)))
                .collect();
            let loss_svg = plot::line_chart(
                &format!("Task {task} {}loss (moving average, {window} it)", prefix.replace('_', " ")),
                "iteration",
                "loss",
                &series,
            );
            let (tp, lp) = (dir.join(format!("{prefix}trace.svg")), dir.join(format!("{prefix}loss.svg")));
            write_text(&tp, &trace_svg)?;
            write_text(&lp, &loss_svg)?;
            inputs.push(trace_path);
            inputs.push(loss_path);
            written.push(tp);
            written.push(lp);
        }
        let ins: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
        let outs: Vec<&Path> = written.iter().map(PathBuf::as_path).collect();
        self.record(&format!("plot_task_{task}"), &ins, &outs)?;
        Ok(written)
    }
}

/// Numeric CSV body (header skipped).
fn read_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Trace rows recorded in a `trace.csv`.
pub fn read_trace(path: &Path) -> Result<Vec<UpdateRecord>> {
    read_csv(path)?
        .into_iter()
        .map(|r| {
            if r.len() != 6 {
                return Err(Error::Data(format!("{}: expected 6 columns", path.display())));
            }
            Ok(UpdateRecord {
                iteration: r[0] as usize,
                loss: r[1],
                delta_l: r[2],
                delta_w: r[3],
                w_m: r[4],
                w_i: r[5],
            })
        })
        .collect()
}

/// Total loss per iteration from a `loss.csv`.
pub fn read_loss_totals(path: &Path) -> Result<Vec<(usize, f64)>> {
    Ok(read_csv(path)?.into_iter().map(|r| (r[0] as usize, r[1])).collect())
}
