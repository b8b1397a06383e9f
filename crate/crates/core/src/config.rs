//! Run configuration: data generation, model shape, objective and training
//! settings in one JSON document.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{write_file, RecordLimits, SyntheticConfig};
use crate::error::{Error, Result};
use crate::model::{Components, ModelOptions};
use crate::numcore::AdamConfig;
use crate::objective::LossConfig;
use crate::params::ModelDims;

/// Environment variable that overrides every seed in a loaded config.
pub const SEED_ENV: &str = "HISE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub components: Components,
    pub visual_graph: bool,
    pub textual_graph: bool,
    pub raw_affinity: bool,
    pub top_k: usize,
    pub num_roles: usize,
    pub max_text_len: usize,
    pub max_frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            components: Components::ALL,
            visual_graph: true,
            textual_graph: true,
            raw_affinity: false,
            top_k: 8,
            num_roles: 3,
            max_text_len: 16,
            max_frames: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Cosine decay from `lr` to zero over the whole run.
    pub cosine_schedule: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        OptimConfig {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            cosine_schedule: false,
        }
    }
}

impl OptimConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub bank_capacity: usize,
    pub momentum: f64,
    /// Evaluate on the training split every this many epochs (0: final only).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 16,
            bank_capacity: 128,
            momentum: 0.995,
            eval_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for parameter initialization and batch shuffling.
    pub seed: u64,
    pub data: SyntheticConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
}

fn bad(field: &str, reason: &str) -> Error {
    Error::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Deserializes JSON, reporting the path of the offending field on error.
pub fn from_json<T: serde::de::DeserializeOwned>(source: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(source);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Config {
            field: if path == "." { "<root>".into() } else { path },
            reason: e.into_inner().to_string(),
        }
    })
}

impl RunConfig {
    pub fn parse(source: &str) -> Result<Self> {
        let cfg: RunConfig = from_json(source)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `HISE_SEED` if set to a valid integer.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| bad(SEED_ENV, "must be an unsigned integer"))?;
            self.seed = seed;
            self.data.seed = seed;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate().map_err(|e| prefix("data", e))?;
        self.loss.validate()?;
        let m = &self.model;
        if m.top_k == 0 {
            return Err(bad("model.top_k", "must be >= 1"));
        }
        if m.num_roles == 0 {
            return Err(bad("model.num_roles", "must be >= 1"));
        }
        if m.max_frames < self.data.frames_per_video {
            return Err(bad("model.max_frames", "must cover data.frames_per_video"));
        }
        // generated captions have seven tokens, plus the appended end token
        if m.max_text_len < 8 {
            return Err(bad("model.max_text_len", "must be >= 8"));
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(bad("optim.lr", "must be a finite value > 0"));
        }
        if !(0.0..1.0).contains(&o.beta1) {
            return Err(bad("optim.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&o.beta2) {
            return Err(bad("optim.beta2", "must lie in [0, 1)"));
        }
        if !(o.eps > 0.0) {
            return Err(bad("optim.eps", "must be > 0"));
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(bad("train.batch_size", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&t.momentum) {
            return Err(bad("train.momentum", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn dims(&self) -> Result<ModelDims> {
        let vocab = self.data.validate()?;
        Ok(ModelDims {
            vocab_size: vocab.size,
            d_model: self.data.d_model,
            d_frame: self.data.d_frame,
            d_roi: self.data.d_roi,
            max_text_len: self.model.max_text_len,
            max_frames: self.model.max_frames,
            num_roles: self.model.num_roles,
        })
    }

    pub fn limits(&self) -> Result<RecordLimits> {
        let vocab = self.data.validate()?;
        Ok(RecordLimits {
            num_roles: self.model.num_roles,
            ..self.data.limits(&vocab)
        })
    }

    pub fn model_options(&self) -> ModelOptions {
        ModelOptions {
            components: self.model.components,
            visual_graph: self.model.visual_graph,
            textual_graph: self.model.textual_graph,
            raw_affinity: self.model.raw_affinity,
            top_k: self.model.top_k,
            conf_threshold: self.data.conf_threshold,
            num_roles: self.model.num_roles,
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

fn prefix(section: &str, e: Error) -> Error {
    match e {
        Error::Config { field, reason } => Error::Config {
            field: format!("{section}.{field}"),
            reason,
        },
        other => other,
    }
}

pub fn hash_json<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config types always serialize");
    hex::encode(Sha256::digest(&json))
}

/// Fixture manifest written next to generated JSONL files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataManifest {
    pub config_hash: String,
    pub config: SyntheticConfig,
    pub videos: usize,
    pub texts: usize,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DataManifest {
    pub fn new(config: &SyntheticConfig, videos: usize, texts: usize) -> Self {
        DataManifest {
            config_hash: hash_json(config),
            config: config.clone(),
            videos,
            texts,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        write_file(&dir.join(MANIFEST_FILE), json.as_bytes())
    }

    /// Reads the manifest in `dir`, or `None` if there is none.
    pub fn read(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        from_json(&text).map(Some)
    }
}

const RUN_SECTIONS: [&str; 5] = ["data", "model", "loss", "optim", "train"];

/// Data-generation settings from either a bare synthetic config or a full
/// run config (recognized by any of its section keys).
pub fn parse_data_config(source: &str) -> Result<SyntheticConfig> {
    let value: serde_json::Value = from_json(source)?;
    let is_run = value
        .as_object()
        .is_some_and(|o| RUN_SECTIONS.iter().any(|k| o.contains_key(*k)));
    let cfg = if is_run {
        RunConfig::parse(source)?.data
    } else {
        let cfg: SyntheticConfig = from_json(source)?;
        cfg.validate()?;
        cfg
    };
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = RunConfig::parse("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.train.bank_capacity, 128);
        assert_eq!(cfg.optim.lr, 1e-4);
        assert_eq!(cfg.loss.lambda1, 10.0);
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let mut cfg = RunConfig::default();
        cfg.loss.alpha = 0.1 + 0.2;
        cfg.optim.lr = 3.0e-3 / 7.0;
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::parse(&json).unwrap(), cfg);
        assert_eq!(RunConfig::parse(&json).unwrap().hash(), cfg.hash());
    }

    #[test]
    fn errors_name_the_field() {
        let err = RunConfig::parse(r#"{"train": {"batch_size": "x"}}"#).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "train.batch_size"), "{err}");
        let err = RunConfig::parse(r#"{"loss": {"alpha": 2.0}}"#).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "loss.alpha"), "{err}");
        let err = RunConfig::parse(r#"{"data": {"pairs": 0}}"#).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "data.pairs"), "{err}");
        let err = RunConfig::parse(r#"{"model": {"typo": 1}}"#).unwrap_err();
        assert!(err.to_string().contains("typo"), "{err}");
    }

    #[test]
    fn seed_override() {
        let mut cfg = RunConfig::default();
        cfg.apply_seed_override(Some("42")).unwrap();
        assert_eq!((cfg.seed, cfg.data.seed), (42, 42));
        assert!(cfg.apply_seed_override(Some("-1")).is_err());
        cfg.apply_seed_override(None).unwrap();
        assert_eq!(cfg.seed, 42);
    }

    #[test]
    fn data_config_accepts_both_shapes() {
        let bare = parse_data_config(r#"{"pairs": 12, "seed": 3}"#).unwrap();
        assert_eq!((bare.pairs, bare.seed), (12, 3));
        let run = parse_data_config(r#"{"data": {"pairs": 10}, "train": {"epochs": 1}}"#).unwrap();
        assert_eq!(run.pairs, 10);
        assert!(parse_data_config(r#"{"pairs": 0}"#).is_err());
        assert!(parse_data_config(r#"{"pears": 3}"#).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(DataManifest::read(dir.path()).unwrap(), None);
        let m = DataManifest::new(&SyntheticConfig::default(), 64, 64);
        m.write(dir.path()).unwrap();
        assert_eq!(DataManifest::read(dir.path()).unwrap(), Some(m));
    }

    #[test]
    fn hash_changes_with_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.epochs += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
