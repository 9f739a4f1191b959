//! Run configuration: a TOML file with one table per module, overridden by
//! `OWODLAB_<SECTION>_<KEY>` environment variables, overridden in turn by
//! `--set section.key=value` flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::plm::{AdaptiveConfig, AdaptiveState};
use crate::proposals::SelectiveSearchConfig;
use crate::protocol::{ShapeKind, ShapeWorldConfig, TaskSpec};
use crate::train::TrainConfig;

pub const ENV_PREFIX: &str = "OWODLAB_";

pub const SECTIONS: [&str; 8] = ["run", "data", "tasks", "detector", "proposals", "plm", "train", "eval"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 7,
            output_dir: PathBuf::from("runs/shapeworld"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset directory; defaults to `<output_dir>/data`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    pub train_images: usize,
    pub test_images: usize,
    pub image_size: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_extent: usize,
    pub max_extent: usize,
    pub margin: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let shapes = ShapeWorldConfig::default();
        Self {
            root: None,
            train_images: 400,
            test_images: 200,
            image_size: shapes.image_size,
            min_instances: shapes.min_instances,
            max_instances: shapes.max_instances,
            min_extent: shapes.min_extent,
            max_extent: shapes.max_extent,
            margin: shapes.margin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub unknown_top_k: usize,
    pub wi_recall: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            unknown_top_k: 5,
            wi_recall: crate::metrics::WI_RECALL_LEVEL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub tasks: TaskSpec,
    pub detector: DetectorConfig,
    pub proposals: SelectiveSearchConfig,
    pub plm: AdaptiveConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run: RunSection::default(),
            data: DataSection::default(),
            tasks: TaskSpec::shapeworld_default(),
            detector: DetectorConfig::default(),
            proposals: SelectiveSearchConfig::desk(),
            plm: AdaptiveConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

fn parse_value(raw: &str) -> Value {
    // bare words that are not TOML literals are taken as strings
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn set_key(table: &mut Table, section: &str, key: &str, value: Value) -> Result<()> {
    if !SECTIONS.contains(&section) {
        return Err(Error::Config(format!(
            "unknown config section {section:?} (expected one of {})",
            SECTIONS.join(", ")
        )));
    }
    if key.is_empty() {
        return Err(Error::Config(format!("missing key for section {section:?}")));
    }
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| Value::Table(Table::new()));
    match entry {
        Value::Table(t) => {
            t.insert(key.to_string(), value);
            Ok(())
        }
        _ => Err(Error::Config(format!("config entry {section:?} is not a table"))),
    }
}

impl RunConfig {
    /// Layers file, environment and `section.key=value` overrides, then
    /// validates the result.
    pub fn load<I>(file: Option<&Path>, env: I, sets: &[String]) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                text.parse::<Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => Table::new(),
        };

        let mut env: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        env.sort();
        for (name, raw) in env {
            let rest = name[ENV_PREFIX.len()..].to_ascii_lowercase();
            let (section, key) = rest
                .split_once('_')
                .ok_or_else(|| Error::Config(format!("environment override {name} has no key")))?;
            set_key(&mut table, section, key, parse_value(&raw))?;
        }

        for set in sets {
            let (path, raw) = set
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {set:?} is not section.key=value")))?;
            let (section, key) = path
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("override key {path:?} is not section.key")))?;
            set_key(&mut table, section.trim(), key.trim(), parse_value(raw.trim()))?;
        }

        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.tasks.validate()?;
        self.detector.validate()?;
        self.proposals.validate()?;
        AdaptiveState::new(&self.plm)?;
        self.train.validate()?;
        self.shapeworld()?.validate()?;
        if self.detector.num_classes != self.tasks.num_classes() {
            return Err(Error::Config(format!(
                "detector.num_classes = {} but the task schedule names {} classes",
                self.detector.num_classes,
                self.tasks.num_classes()
            )));
        }
        if self.detector.image_size != self.data.image_size {
            return Err(Error::Config(format!(
                "detector.image_size = {} but data.image_size = {}",
                self.detector.image_size, self.data.image_size
            )));
        }
        if self.data.train_images == 0 || self.data.test_images == 0 {
            return Err(Error::Config("train and test image counts must be positive".into()));
        }
        if !(self.eval.wi_recall > 0.0 && self.eval.wi_recall <= 1.0) {
            return Err(Error::Config("eval.wi_recall must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Shape-world generator settings; class names must name shapes.
    pub fn shapeworld(&self) -> Result<ShapeWorldConfig> {
        let classes = self
            .tasks
            .class_names
            .iter()
            .map(|n| ShapeKind::from_name(n).ok_or_else(|| Error::Config(format!("no shape named {n:?}"))))
            .collect::<Result<_>>()?;
        Ok(ShapeWorldConfig {
            classes,
            image_size: self.data.image_size,
            min_instances: self.data.min_instances,
            max_instances: self.data.max_instances,
            min_extent: self.data.min_extent,
            max_extent: self.data.max_extent,
            margin: self.data.margin,
        })
    }

    pub fn data_root(&self) -> PathBuf {
        self.data.root.clone().unwrap_or_else(|| self.run.output_dir.join("data"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn sha256(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DecodingMode;
    use crate::train::OptimizerKind;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.sha256().len(), 64);
    }

    #[test]
    fn precedence_file_then_env_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "[train]\nlearning_rate = 0.01\niterations = 10\n[detector]\nmode = \"coupled\"\n[run]\nseed = 3\n",
        )
        .unwrap();
        let cfg = RunConfig::load(
            Some(&path),
            env(&[
                ("OWODLAB_TRAIN_LEARNING_RATE", "0.02"),
                ("OWODLAB_TRAIN_OPTIMIZER", "sgd"),
                ("HOME", "/root"),
            ]),
            &["train.learning_rate=0.03".into(), "detector.mode=fully_decoupled".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.learning_rate, 0.03);
        assert_eq!(cfg.train.iterations, 10);
        assert_eq!(cfg.train.optimizer, OptimizerKind::Sgd);
        assert_eq!(cfg.detector.mode, DecodingMode::FullyDecoupled);
        assert_eq!(cfg.run.seed, 3);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn bad_configs_are_config_errors() {
        let cases: Vec<Vec<String>> = vec![
            vec!["nope.key=1".into()],
            vec!["train.no_such_key=1".into()],
            vec!["train.learning_rate=-1".into()],
            vec!["detector.heads=5".into()],
            vec!["detector.num_classes=4".into()],
            vec!["plm.pi_pma=1.5".into()],
            vec!["tasks.tasks=[[0],[1]]".into()],
            vec!["noequals".into()],
        ];
        for sets in cases {
            let err = RunConfig::load(None, Vec::new(), &sets).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{sets:?}: {err}");
        }
        let err = RunConfig::load(None, env(&[("OWODLAB_BOGUS_X", "1")]), &[]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = RunConfig::load(Some(Path::new("/nonexistent/run.toml")), Vec::new(), &[]).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.run.seed += 1;
        assert_ne!(a.sha256(), b.sha256());
        assert_eq!(a.sha256(), a.clone().sha256());
    }
}
