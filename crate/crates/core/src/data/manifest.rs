//! Dataset manifests.
//!
//! ```json
//! {
//!   "source":  { "kind": "idx", "images": "mnist/train-images-idx3-ubyte",
//!                "labels": "mnist/train-labels-idx1-ubyte", "limit": 10000,
//!                "input_shape": [3, 32, 32],
//!                "sha256": { "images": "…", "labels": "…" } },
//!   "targets": [
//!     { "name": "usps", "data": { "kind": "idx", "images": "…", "labels": "…" } },
//!     { "name": "rotated", "shifts": [ { "kind": "rotate", "degrees": 30 } ] },
//!     { "name": "inverted", "preset": "inverted" }
//!   ]
//! }
//! ```
//!
//! Relative paths resolve against the manifest's directory; `${VAR}` expands
//! from the environment. A target without `data` reuses the source data.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::shift::apply_shifts;
use super::{load_idx, synth_blobs, BlobSpec, Dataset, IdxLoadOptions, ShiftSpec};
use crate::error::{MpbmError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Blobs(BlobSpec),
    Idx {
        images: String,
        labels: String,
        #[serde(flatten)]
        options: IdxLoadOptions,
        /// Expected hex digests keyed by `images` / `labels`.
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        sha256: BTreeMap<String, String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shifts: Vec<ShiftSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub source: DataSource,
    #[serde(default)]
    pub targets: Vec<TargetSpec>,
    /// Offset every blob and shift seed by the run seed, making each run seed
    /// an independent draw of the data.
    #[serde(default)]
    pub reseed: bool,
    #[serde(skip)]
    pub base_dir: PathBuf,
    #[serde(skip)]
    pub seed_offset: u64,
}

#[derive(Clone, Debug)]
pub struct LoadedManifest {
    pub source: Dataset,
    pub targets: Vec<Dataset>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn expand_env(raw: &str, field: &str) -> Result<String> {
    let mut out = String::new();
    let mut rest = raw;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let end = rest[start..]
            .find('}')
            .ok_or_else(|| MpbmError::config(field, format!("unterminated `${{` in `{raw}`")))?;
        let var = &rest[start + 2..start + end];
        let val = std::env::var(var)
            .map_err(|_| MpbmError::config(field, format!("environment variable `{var}` is not set")))?;
        out.push_str(&val);
        rest = &rest[start + end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

impl Manifest {
    pub fn from_json(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut m: Manifest = serde_json::from_str(text)
            .map_err(|e| MpbmError::config("manifest", e.to_string()))?;
        m.base_dir = base_dir.into();
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MpbmError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, base).map_err(|e| match e {
            MpbmError::Config { detail, .. } => MpbmError::config(path.display().to_string(), detail),
            e => e,
        })
    }

    /// The data for one run seed: unchanged unless `reseed` is set.
    pub fn for_seed(&self, seed: u64) -> Manifest {
        let mut m = self.clone();
        m.seed_offset = if self.reseed { seed } else { 0 };
        m
    }

    pub fn resolve_path(&self, raw: &str, field: &str) -> Result<PathBuf> {
        let p = PathBuf::from(expand_env(raw, field)?);
        Ok(if p.is_absolute() { p } else { self.base_dir.join(p) })
    }

    fn load_source(&self, src: &DataSource, field: &str) -> Result<Dataset> {
        match src {
            DataSource::Blobs(spec) => synth_blobs(&BlobSpec {
                seed: spec.seed.wrapping_add(self.seed_offset),
                ..spec.clone()
            }),
            DataSource::Idx {
                images,
                labels,
                options,
                sha256,
            } => {
                let mut paths = Vec::new();
                for (key, raw) in [("images", images), ("labels", labels)] {
                    let f = format!("{field}.{key}");
                    let p = self.resolve_path(raw, &f)?;
                    if !p.is_file() {
                        return Err(MpbmError::config(f, format!("no such file `{}`", p.display())));
                    }
                    if let Some(want) = sha256.get(key) {
                        let bytes = fs::read(&p).map_err(|e| MpbmError::io(&p, e))?;
                        let got = sha256_hex(&bytes);
                        if !got.eq_ignore_ascii_case(want) {
                            return Err(MpbmError::Format {
                                format: "manifest",
                                detail: format!("checksum mismatch for `{}`: expected {want}, got {got}", p.display()),
                            });
                        }
                    }
                    paths.push(p);
                }
                load_idx(&paths[0], &paths[1], options)
            }
        }
    }

    pub fn load_all(&self) -> Result<LoadedManifest> {
        let mut source = self.load_source(&self.source, "source")?;
        source.domain = "source".into();
        let mut targets = Vec::with_capacity(self.targets.len());
        for (i, t) in self.targets.iter().enumerate() {
            if t.name == "source" {
                return Err(MpbmError::config(format!("targets[{i}].name"), "`source` is reserved"));
            }
            let base = match &t.data {
                Some(src) => self.load_source(src, &format!("targets[{i}].data"))?,
                None => source.clone(),
            };
            if base.num_classes() != source.num_classes() || base.input_shape() != source.input_shape() {
                return Err(MpbmError::config(
                    format!("targets[{i}]"),
                    format!(
                        "target `{}` has shape {:?} / {} classes, source has {:?} / {}",
                        t.name,
                        base.input_shape(),
                        base.num_classes(),
                        source.input_shape(),
                        source.num_classes()
                    ),
                ));
            }
            let mut chain = match &t.preset {
                Some(p) => ShiftSpec::preset(p, i as u64)?,
                None => Vec::new(),
            };
            chain.extend(t.shifts.iter().cloned());
            for s in &mut chain {
                s.seed = s.seed.wrapping_add(self.seed_offset);
            }
            let mut d = apply_shifts(&base, &chain)?;
            d.name = t.name.clone();
            d.domain = t.name.clone();
            targets.push(d);
        }
        Ok(LoadedManifest { source, targets })
    }
}
