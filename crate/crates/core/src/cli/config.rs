//! Run configuration files.
//!
//! A run config is a JSON object holding every [`TrainConfig`] field at the
//! top level plus the keys below. Unknown keys are rejected.
//!
//! ```json
//! {
//!   "name": "blobs",
//!   "manifest": "blobs_manifest.json",
//!   "architecture": "mlp",
//!   "hidden": [32],
//!   "feature_dim": 16,
//!   "seeds": [0, 1, 2, 3, 4],
//!   "checkpoint_every": 0,
//!   "lambda_adv": 0.5,
//!   "ablation": { "no_adv": false },
//!   "sgld": { "steps": 5, "eta": 0.05 }
//! }
//! ```
//!
//! Relative paths resolve against the config file's directory. Overrides use
//! dotted keys (`sgld.eta=0.1`), and values parse as JSON, falling back to a
//! plain string.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{Dataset, Manifest};
use crate::error::{MpbmError, Result};
use crate::models::Architecture;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Run-directory name; defaults to the config file stem.
    pub name: Option<String>,
    pub manifest: Option<PathBuf>,
    /// `mlp` or `lenet-small`.
    pub architecture: String,
    /// Hidden widths of `mlp`; ignored by `lenet-small`.
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    /// Output root; `--out` and then `MPBM_OUT_DIR` take precedence when given.
    pub output_dir: Option<PathBuf>,
    /// Start from this prediction-model checkpoint instead of pretraining.
    pub init_checkpoint: Option<PathBuf>,
    /// Save a full checkpoint every this many outer iterations (0: final only).
    pub checkpoint_every: usize,
    /// Seeds for `ablate`, `sweep` and multi-seed `train`; empty means `[seed]`.
    pub seeds: Vec<u64>,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: None,
            manifest: None,
            architecture: "mlp".into(),
            hidden: vec![32],
            feature_dim: 16,
            output_dir: None,
            init_checkpoint: None,
            checkpoint_every: 0,
            seeds: Vec::new(),
            train: TrainConfig::default(),
        }
    }
}

/// Set `key` (dotted) in a JSON object to `raw`, parsed as JSON when possible.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| MpbmError::config("--override", format!("expected key=value, got `{assignment}`")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(MpbmError::config("--override", format!("bad key `{key}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(m) => m,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().expect("just set")
            }
            _ => {
                return Err(MpbmError::config(
                    parts[..i].join("."),
                    format!("cannot set `{key}`: not an object"),
                ))
            }
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("key has at least one part")
}

const OWN_KEYS: [&str; 9] = [
    "name",
    "manifest",
    "architecture",
    "hidden",
    "feature_dim",
    "output_dir",
    "init_checkpoint",
    "checkpoint_every",
    "seeds",
];

impl RunConfig {
    /// Parse a config value; errors name the offending key.
    pub fn from_value(value: Value, origin: &str) -> Result<Self> {
        let Value::Object(mut map) = value else {
            return Err(MpbmError::config(origin, "config must be a JSON object"));
        };
        // Split off the training keys: `flatten` loses error paths and
        // unknown-key checks, so each half is parsed on its own.
        let own: serde_json::Map<String, Value> = OWN_KEYS
            .iter()
            .filter_map(|k| map.remove(*k).map(|v| (k.to_string(), v)))
            .collect();
        let named = |e: serde_path_to_error::Error<serde_json::Error>| {
            let path = e.path().to_string();
            let path = if path == "." { origin.to_string() } else { format!("{origin}: {path}") };
            MpbmError::config(path, e.inner().to_string())
        };
        let train: TrainConfig = serde_path_to_error::deserialize(Value::Object(map)).map_err(named)?;
        let mut cfg: RunConfig = serde_path_to_error::deserialize(Value::Object(own)).map_err(named)?;
        cfg.train = train;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read `path`, apply overrides, resolve relative paths.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MpbmError::io(path, e))?;
        let origin = path.display().to_string();
        let mut value: Value = serde_json::from_str(&text).map_err(|e| MpbmError::config(&origin, e.to_string()))?;
        if !value.is_object() {
            return Err(MpbmError::config(origin, "config must be a JSON object"));
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg = Self::from_value(value, &origin)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.manifest = cfg.manifest.map(|p| absolute(base, &p));
        cfg.init_checkpoint = cfg.init_checkpoint.map(|p| absolute(base, &p));
        cfg.output_dir = cfg.output_dir.map(|p| absolute(base, &p));
        if cfg.name.is_none() {
            cfg.name = path.file_stem().map(|s| s.to_string_lossy().into_owned());
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.architecture != "mlp" && self.architecture != "lenet-small" {
            return Err(MpbmError::config(
                "architecture",
                format!("unknown architecture `{}` (expected mlp or lenet-small)", self.architecture),
            ));
        }
        if self.feature_dim == 0 {
            return Err(MpbmError::config("feature_dim", "must be positive"));
        }
        self.train.validate()
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let path = self
            .manifest
            .as_ref()
            .ok_or_else(|| MpbmError::config("manifest", "missing dataset manifest path"))?;
        if !path.is_file() {
            return Err(MpbmError::config("manifest", format!("no such file `{}`", path.display())));
        }
        Manifest::load(path)
    }

    /// Architecture for a dataset's input shape and class count.
    pub fn architecture_for(&self, data: &Dataset) -> Result<Architecture> {
        Architecture::preset(
            &self.architecture,
            data.input_shape(),
            self.feature_dim,
            &self.hidden,
            data.num_classes(),
        )
    }

    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.train.seed]
        } else {
            self.seeds.clone()
        }
    }

    /// Copy pinned to one seed, as written into a run directory.
    pub fn for_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.train.seed = seed;
        c.seeds = vec![seed];
        c
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

fn absolute(base: &Path, p: &Path) -> PathBuf {
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    if joined.is_absolute() {
        joined
    } else {
        std::env::current_dir().map(|d| d.join(&joined)).unwrap_or(joined)
    }
}
