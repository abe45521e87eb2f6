use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde_json::{Map, Value};
use tsvr_core::{LabelPropagation, TrainConfig};

/// Keys owned by the run configuration rather than [`TrainConfig`].
const RUN_KEYS: [&str; 5] = [
    "manifest",
    "output_dir",
    "label_propagation",
    "standardize",
    "normalize_attributes",
];

/// Everything a command needs to reproduce a run: the dataset, where to
/// write, preprocessing switches, label propagation, and every training
/// hyperparameter as flat top-level keys.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub label_propagation: LabelPropagation,
    pub standardize: bool,
    pub normalize_attributes: bool,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            output_dir: PathBuf::from("run"),
            label_propagation: LabelPropagation::default(),
            standardize: false,
            normalize_attributes: false,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_value(value: Value) -> Result<Self> {
        let Value::Object(mut map) = value else {
            bail!("config must be a JSON object");
        };
        let mut cfg = RunConfig::default();
        if let Some(v) = map.remove("manifest") {
            cfg.manifest = serde_json::from_value(v).context("config key `manifest`")?;
        }
        if let Some(v) = map.remove("output_dir") {
            cfg.output_dir = serde_json::from_value(v).context("config key `output_dir`")?;
        }
        if let Some(v) = map.remove("label_propagation") {
            cfg.label_propagation = serde_json::from_value(v).context("config key `label_propagation`")?;
        }
        if let Some(v) = map.remove("standardize") {
            cfg.standardize = serde_json::from_value(v).context("config key `standardize`")?;
        }
        if let Some(v) = map.remove("normalize_attributes") {
            cfg.normalize_attributes = serde_json::from_value(v).context("config key `normalize_attributes`")?;
        }
        cfg.train = serde_json::from_value(Value::Object(map)).context("training configuration")?;
        cfg.train.validate()?;
        cfg.label_propagation.validate()?;
        Ok(cfg)
    }

    pub fn to_value(&self) -> Value {
        let Value::Object(mut map) = serde_json::to_value(&self.train).expect("config serializes") else {
            unreachable!("TrainConfig serializes to an object");
        };
        let mut run = Map::new();
        run.insert("manifest".into(), serde_json::to_value(&self.manifest).expect("path serializes"));
        run.insert("output_dir".into(), serde_json::to_value(&self.output_dir).expect("path serializes"));
        run.insert(
            "label_propagation".into(),
            serde_json::to_value(self.label_propagation).expect("serializes"),
        );
        run.insert("standardize".into(), Value::Bool(self.standardize));
        run.insert("normalize_attributes".into(), Value::Bool(self.normalize_attributes));
        run.append(&mut map);
        debug_assert!(RUN_KEYS.iter().all(|k| run.contains_key(*k)));
        Value::Object(run)
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let value: Value =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let mut cfg = Self::from_value(value).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        cfg.manifest = cfg.manifest.map(|m| resolve(base, &m));
        cfg.output_dir = resolve(base, &cfg.output_dir);
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_value())?;
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    /// Applies one `key=value` override. Nested keys use dots
    /// (`label_propagation.k=5`); the value is parsed as JSON and falls back
    /// to a plain string. Unknown keys are rejected.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{spec}` is not of the form key=value"))?;
        let key = key.trim();
        let value: Value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
        let mut root = self.to_value();
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| anyhow!("unknown config key `{key}`"))?;
        }
        *slot = value;
        let updated = Self::from_value(root).with_context(|| format!("override `{spec}`"))?;
        *self = updated;
        Ok(())
    }

    pub fn manifest(&self) -> Result<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| anyhow!("config does not name a dataset `manifest`"))
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tsvr_core::AlignmentMode;

    #[test]
    fn flat_json_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.manifest = Some("data/manifest.json".into());
        cfg.train.alignment_mode = AlignmentMode::Mmd;
        cfg.label_propagation.k = 4;
        let v = cfg.to_value();
        assert_eq!(v["learning_rate"], serde_json::json!(1e-5));
        assert_eq!(v["label_propagation"]["k"], 4);
        assert_eq!(RunConfig::from_value(v).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_value(serde_json::json!({"learning_rate": 1e-3, "lernrate": 1})).unwrap_err();
        assert!(format!("{err:#}").contains("lernrate"), "{err:#}");
        assert!(RunConfig::from_value(serde_json::json!({"label_propagation": {"kk": 1}})).is_err());
    }

    #[test]
    fn overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("max_iterations=10").unwrap();
        cfg.apply_override("alignment_mode=none").unwrap();
        cfg.apply_override("label_propagation.omega=0.5").unwrap();
        cfg.apply_override("embed_dim=12").unwrap();
        assert_eq!(cfg.train.max_iterations, 10);
        assert_eq!(cfg.train.alignment_mode, AlignmentMode::None);
        assert_eq!(cfg.label_propagation.omega, 0.5);
        assert_eq!(cfg.train.embed_dim, Some(12));
        assert!(cfg.apply_override("nope=1").is_err());
        assert!(cfg.apply_override("label_propagation.x=1").is_err());
        assert!(cfg.apply_override("batch_size=0").is_err());
        assert!(cfg.apply_override("max_iterations").is_err());
        assert_eq!(cfg.train.max_iterations, 10);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"manifest": "d/manifest.json", "output_dir": "out"}"#).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.manifest.unwrap(), dir.path().join("d/manifest.json"));
        assert_eq!(cfg.output_dir, dir.path().join("out"));
    }
}
