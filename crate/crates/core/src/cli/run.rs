//! Run directories.
//!
//! ```text
//! <run dir>/
//!   config.json          resolved config, pinned to one seed
//!   pretrain.json        pretraining losses (absent when starting from a checkpoint)
//!   metrics.jsonl        one record per outer iteration
//!   eval.csv             final accuracy per domain
//!   checkpoints/         pretrain.mpbm, iter-NNNN.mpbm, final.mpbm, abort.mpbm
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::config::RunConfig;
use super::report::{num, write_csv};
use crate::data::{LoadedManifest, Manifest};
use crate::error::{MpbmError, Result};
use crate::models::{Checkpoint, PredictionModel};
use crate::trainer::{model_checkpoint, model_from_checkpoint, Trainer};

pub const PRETRAIN_CHECKPOINT: &str = "checkpoints/pretrain.mpbm";
pub const FINAL_CHECKPOINT: &str = "checkpoints/final.mpbm";
pub const ABORT_CHECKPOINT: &str = "checkpoints/abort.mpbm";

/// Whether an error means training itself failed, as opposed to bad input.
pub fn is_training_abort(e: &MpbmError) -> bool {
    matches!(e, MpbmError::Divergence { .. } | MpbmError::NonFinite(_))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("checkpoints")).map_err(|e| MpbmError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| MpbmError::io(path, e))
}

/// Load the prediction model from `path`, checking it against the
/// architecture the config builds for `data`.
pub fn load_model(cfg: &RunConfig, path: &Path, data: &LoadedManifest) -> Result<PredictionModel> {
    let ck = Checkpoint::load(path)?;
    model_from_checkpoint(&ck, cfg.architecture_for(&data.source)?)
}

/// Pretrain from scratch into `dir`, or load `init_checkpoint`.
pub fn initial_model(cfg: &RunConfig, data: &LoadedManifest, dir: &Path) -> Result<PredictionModel> {
    if let Some(p) = &cfg.init_checkpoint {
        return load_model(cfg, p, data);
    }
    create_dir(dir)?;
    write_text(&dir.join("config.json"), &cfg.to_json())?;
    let mut pre = Trainer::new(cfg.train.clone(), cfg.architecture_for(&data.source)?)?;
    let report = match pre.pretrain(&data.source) {
        Ok(r) => r,
        Err(e) => {
            if is_training_abort(&e) {
                model_checkpoint(&pre.model, cfg.train.seed, 0).save(&dir.join(ABORT_CHECKPOINT))?;
            }
            return Err(e);
        }
    };
    let mut text = serde_json::to_string(&report)?;
    text.push('\n');
    write_text(&dir.join("pretrain.json"), &text)?;
    model_checkpoint(&pre.model, cfg.train.seed, 0).save(&dir.join(PRETRAIN_CHECKPOINT))?;
    Ok(pre.model)
}

/// Fine-tune `model` under `cfg` (pinned to one seed), writing every
/// artifact into `dir`. Returns the final per-domain accuracy.
pub fn execute(cfg: &RunConfig, model: PredictionModel, data: &LoadedManifest, dir: &Path) -> Result<BTreeMap<String, f64>> {
    create_dir(dir)?;
    write_text(&dir.join("config.json"), &cfg.to_json())?;
    let metrics_path = dir.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(|e| MpbmError::io(&metrics_path, e))?);
    let targets: Vec<_> = data.targets.iter().collect();
    let mut trainer = Trainer::with_model(cfg.train.clone(), model)?;
    let every = cfg.checkpoint_every;
    let result = trainer.run(&data.source, &targets, |m, t| {
        let line = serde_json::to_string(m)?;
        writeln!(metrics, "{line}")
            .and_then(|_| metrics.flush())
            .map_err(|e| MpbmError::io(&metrics_path, e))?;
        if every > 0 && m.iter % every == 0 {
            t.checkpoint().save(&dir.join(format!("checkpoints/iter-{:04}.mpbm", m.iter)))?;
        }
        Ok(())
    });
    let trace = match result {
        Ok(trace) => trace,
        Err(e) => {
            if is_training_abort(&e) {
                trainer.checkpoint().save(&dir.join(ABORT_CHECKPOINT))?;
            }
            return Err(e);
        }
    };
    trainer.checkpoint().save(&dir.join(FINAL_CHECKPOINT))?;
    let eval = match trace.last() {
        Some(m) => m.eval.clone(),
        None => trainer.evaluate(&data.source, &targets)?,
    };
    let rows: Vec<Vec<String>> = eval.iter().map(|(d, a)| vec![d.clone(), num(*a)]).collect();
    write_csv(&dir.join("eval.csv"), &["domain", "accuracy"], &rows)?;
    Ok(eval)
}

/// Mean target accuracy, or source accuracy when there are no targets.
pub fn headline_accuracy(eval: &BTreeMap<String, f64>) -> f64 {
    let t: Vec<f64> = eval.iter().filter(|(k, _)| k.as_str() != "source").map(|(_, v)| *v).collect();
    if t.is_empty() {
        eval.get("source").copied().unwrap_or(f64::NAN)
    } else {
        t.iter().sum::<f64>() / t.len() as f64
    }
}

/// One configuration of a multi-run command.
pub struct Variant {
    pub label: String,
    /// Directory under the command root.
    pub dir: String,
    pub cfg: RunConfig,
}

pub struct VariantResult {
    pub label: String,
    pub seed: u64,
    pub eval: BTreeMap<String, f64>,
}

/// Run every variant for every seed. Pretraining happens once per seed under
/// `root/pretrain/seed-S` and each variant starts from that checkpoint, so
/// its recorded config reproduces it on its own.
pub fn run_variants(
    base: &RunConfig,
    variants: &[Variant],
    manifest: &Manifest,
    root: &Path,
) -> Result<Vec<VariantResult>> {
    let mut out = Vec::new();
    let mut data = None;
    for seed in base.seed_list() {
        let data = load_for_seed(manifest, seed, &mut data)?;
        let seeded = base.for_seed(seed);
        let init = match &seeded.init_checkpoint {
            Some(p) => p.clone(),
            None => {
                let pre_dir = root.join("pretrain").join(format!("seed-{seed}"));
                initial_model(&seeded, data, &pre_dir)?;
                absolute(&pre_dir.join(PRETRAIN_CHECKPOINT))
            }
        };
        for v in variants {
            let mut cfg = v.cfg.for_seed(seed);
            cfg.init_checkpoint = Some(init.clone());
            let model = load_model(&cfg, &init, data)?;
            let dir = root.join(&v.dir).join(format!("seed-{seed}"));
            let eval = execute(&cfg, model, data, &dir)?;
            eprintln!("{} seed {seed}: {}", v.label, format_eval(&eval));
            out.push(VariantResult {
                label: v.label.clone(),
                seed,
                eval,
            });
        }
    }
    Ok(out)
}

/// Data for `seed`, reusing `cache` when the manifest does not reseed.
pub fn load_for_seed<'a>(manifest: &Manifest, seed: u64, cache: &'a mut Option<LoadedManifest>) -> Result<&'a LoadedManifest> {
    if manifest.reseed || cache.is_none() {
        *cache = Some(manifest.for_seed(seed).load_all()?);
    }
    Ok(cache.as_ref().expect("just loaded"))
}

pub fn format_eval(eval: &BTreeMap<String, f64>) -> String {
    eval.iter().map(|(k, v)| format!("{k} {v:.4}")).collect::<Vec<_>>().join(", ")
}

fn absolute(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
    }
}
