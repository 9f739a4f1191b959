//! The open-world lifecycle: task schedule, known/unknown registry,
//! annotation interchange, exemplar replay and the shape-world corpus.

mod exemplar;
mod shapeworld;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::raster::RasterImage;

pub use exemplar::{ExemplarStore, INDEX_FILE as EXEMPLAR_INDEX_FILE};
pub use shapeworld::{generate_shapeworld, render_shape, ShapeKind, ShapeWorldConfig};

/// Ordered class groups; task `t` introduces `tasks[t]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub class_names: Vec<String>,
    pub tasks: Vec<Vec<u32>>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self::shapeworld_default()
    }
}

impl TaskSpec {
    pub fn new(class_names: Vec<String>, tasks: Vec<Vec<u32>>) -> Result<Self> {
        let spec = Self { class_names, tasks };
        spec.validate()?;
        Ok(spec)
    }

    /// Four tasks over the six shape classes: three, then one at a time.
    pub fn shapeworld_default() -> Self {
        let names = ShapeKind::ALL.iter().map(|k| k.name().to_string()).collect();
        Self::new(names, vec![vec![0, 1, 2], vec![3], vec![4], vec![5]]).expect("valid default schedule")
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() || self.tasks.iter().any(Vec::is_empty) {
            return Err(Error::Config("every task must introduce at least one class".into()));
        }
        let mut seen = BTreeSet::new();
        for &c in self.tasks.iter().flatten() {
            if !seen.insert(c) {
                return Err(Error::Config(format!("class {c} appears in more than one task")));
            }
        }
        let expected: BTreeSet<u32> = (0..self.class_names.len() as u32).collect();
        if seen != expected {
            return Err(Error::Config(format!(
                "task groups cover {seen:?} but the label space is 0..{}",
                self.class_names.len()
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_name(&self, id: u32) -> &str {
        self.class_names.get(id as usize).map(String::as_str).unwrap_or("?")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRegistry {
    task: usize,
    known: BTreeSet<u32>,
    all: BTreeSet<u32>,
    previous: BTreeSet<u32>,
}

impl ClassRegistry {
    /// Registry at the first task.
    pub fn new(spec: &TaskSpec) -> Self {
        Self {
            task: 0,
            known: spec.tasks[0].iter().copied().collect(),
            all: (0..spec.num_classes() as u32).collect(),
            previous: BTreeSet::new(),
        }
    }

    /// Registry after `task` advances from the first one.
    pub fn at_task(spec: &TaskSpec, task: usize) -> Result<Self> {
        let mut reg = Self::new(spec);
        for _ in 0..task {
            reg.advance_task(spec)?;
        }
        Ok(reg)
    }

    pub fn task(&self) -> usize {
        self.task
    }

    pub fn known(&self) -> &BTreeSet<u32> {
        &self.known
    }

    pub fn unknown(&self) -> BTreeSet<u32> {
        self.all.difference(&self.known).copied().collect()
    }

    /// Classes known before the current task started.
    pub fn previously_known(&self) -> &BTreeSet<u32> {
        &self.previous
    }

    /// Classes introduced by the current task.
    pub fn current(&self) -> BTreeSet<u32> {
        self.known.difference(&self.previous).copied().collect()
    }

    pub fn is_known(&self, class: u32) -> bool {
        self.known.contains(&class)
    }

    pub fn advance_task(&mut self, spec: &TaskSpec) -> Result<()> {
        let next = self.task + 1;
        let group = spec.tasks.get(next).ok_or(Error::NoNextTask(self.task))?;
        self.previous = self.known.clone();
        self.known.extend(group.iter().copied());
        self.task = next;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub class: u32,
    #[serde(rename = "box", with = "crate::geometry::corner_format")]
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    pub image_id: u64,
    /// Relative to the directory holding the annotation file.
    pub image_path: PathBuf,
    pub instances: Vec<Instance>,
}

impl AnnotatedImage {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for inst in &self.instances {
            if inst.class as usize >= num_classes {
                return Err(Error::Data(format!(
                    "image {}: class {} outside the label space",
                    self.image_id, inst.class
                )));
            }
            if !inst.bbox.within_unit_square(1e-9) {
                return Err(Error::Data(format!(
                    "image {}: box {:?} leaves the unit square",
                    self.image_id,
                    inst.bbox.corners()
                )));
            }
        }
        Ok(())
    }

    pub fn load_image(&self, root: &Path) -> Result<RasterImage> {
        RasterImage::read_ppm(&root.join(&self.image_path))
    }
}

/// The instances training may see at the registry's task.
pub fn visible_annotations(img: &AnnotatedImage, reg: &ClassRegistry) -> Vec<Instance> {
    img.instances
        .iter()
        .filter(|i| reg.is_known(i.class))
        .copied()
        .collect()
}
