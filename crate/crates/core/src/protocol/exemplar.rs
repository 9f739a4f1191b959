use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{visible_annotations, AnnotatedImage, ClassRegistry};
use crate::error::{Error, Result};
use crate::jsonl;

pub const INDEX_FILE: &str = "index.json";

/// Up to `capacity` stored images per known class, first seen first kept.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarStore {
    capacity: usize,
    per_class: BTreeMap<u32, Vec<AnnotatedImage>>,
}

#[derive(Serialize, Deserialize)]
struct Index {
    capacity: usize,
    classes: BTreeMap<u32, String>,
}

impl ExemplarStore {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            per_class: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn count(&self, class: u32) -> usize {
        self.per_class.get(&class).map_or(0, Vec::len)
    }

    pub fn classes(&self) -> impl Iterator<Item = u32> + '_ {
        self.per_class.keys().copied()
    }

    /// Files `img` under every known class it shows that still has room.
    pub fn offer(&mut self, img: &AnnotatedImage, reg: &ClassRegistry) {
        let mut classes: Vec<u32> = visible_annotations(img, reg).iter().map(|i| i.class).collect();
        classes.sort_unstable();
        classes.dedup();
        for c in classes {
            let slot = self.per_class.entry(c).or_default();
            if slot.len() < self.capacity && slot.iter().all(|e| e.image_id != img.image_id) {
                slot.push(img.clone());
            }
        }
    }

    /// Exemplars by class id then insertion order, each image once.
    pub fn build_finetune_set(&self) -> Vec<AnnotatedImage> {
        let mut seen = HashSet::new();
        self.per_class
            .values()
            .flatten()
            .filter(|img| seen.insert(img.image_id))
            .cloned()
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = Index {
            capacity: self.capacity,
            classes: BTreeMap::new(),
        };
        for (class, imgs) in &self.per_class {
            let name = format!("class_{class}.jsonl");
            jsonl::write(&dir.join(&name), imgs)?;
            index.classes.insert(*class, name);
        }
        let path = dir.join(INDEX_FILE);
        let json = serde_json::to_string_pretty(&index).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: Index =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let mut store = Self::new(index.capacity);
        for (class, name) in index.classes {
            let imgs: Vec<AnnotatedImage> = jsonl::read(&dir.join(name))?;
            if imgs.len() > index.capacity {
                return Err(Error::Data(format!("class {class} holds more than {} exemplars", index.capacity)));
            }
            store.per_class.insert(class, imgs);
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;
    use crate::protocol::{Instance, TaskSpec};
    use proptest::prelude::*;

    fn image(id: u64, classes: &[u32]) -> AnnotatedImage {
        AnnotatedImage {
            image_id: id,
            image_path: format!("{id}.ppm").into(),
            instances: classes
                .iter()
                .map(|&class| Instance {
                    class,
                    bbox: BoundingBox::from_corners(0.1, 0.1, 0.4, 0.4),
                })
                .collect(),
        }
    }

    #[test]
    fn balanced_set_sizes() {
        let reg = ClassRegistry::new(&TaskSpec::shapeworld_default());
        let mut store = ExemplarStore::new(50);
        for id in 0..200 {
            store.offer(&image(id, &[(id % 3) as u32]), &reg);
        }
        assert_eq!(store.build_finetune_set().len(), 150);

        let mut store = ExemplarStore::new(50);
        for id in 0..100 {
            store.offer(&image(id, &[0]), &reg);
            store.offer(&image(1000 + id, &[1]), &reg);
        }
        for id in 0..10 {
            store.offer(&image(2000 + id, &[2]), &reg);
        }
        assert_eq!(store.count(2), 10);
        assert_eq!(store.build_finetune_set().len(), 110);
    }

    #[test]
    fn shared_images_deduplicated() {
        let reg = ClassRegistry::new(&TaskSpec::shapeworld_default());
        let mut store = ExemplarStore::new(5);
        store.offer(&image(1, &[0, 1]), &reg);
        store.offer(&image(2, &[1, 5]), &reg);
        store.offer(&image(2, &[1, 5]), &reg);
        assert_eq!(store.count(0), 1);
        assert_eq!(store.count(1), 2);
        assert_eq!(store.count(5), 0);
        let ids: Vec<u64> = store.build_finetune_set().iter().map(|i| i.image_id).collect();
        assert_eq!(ids, vec![1, 2]);
    }

    #[test]
    fn persisted_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let reg = ClassRegistry::new(&TaskSpec::shapeworld_default());
        let mut store = ExemplarStore::new(3);
        for id in 0..7 {
            store.offer(&image(id, &[(id % 2) as u32, 2]), &reg);
        }
        store.save(dir.path()).unwrap();
        assert_eq!(ExemplarStore::load(dir.path()).unwrap(), store);
    }

    proptest! {
        #[test]
        fn capacity_never_exceeded(
            offers in prop::collection::vec((0u64..40, prop::collection::vec(0u32..6, 1..4)), 0..120),
            cap in 1usize..6,
        ) {
            let reg = ClassRegistry::at_task(&TaskSpec::shapeworld_default(), 1).unwrap();
            let mut store = ExemplarStore::new(cap);
            for (id, classes) in offers {
                store.offer(&image(id, &classes), &reg);
                for c in 0..6 {
                    prop_assert!(store.count(c) <= cap);
                }
            }
            prop_assert!(store.build_finetune_set().len() <= cap * reg.known().len());
        }
    }
}
