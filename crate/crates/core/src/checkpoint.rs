//! Checkpoint directory of a trained model.
//!
//! ```text
//! <dir>/manifest.json   format version, config hash, full config, task list
//! <dir>/task_<k>.json   one bundle record per task
//! <dir>/keys.json       task-key memory
//! ```
//!
//! All numbers are written as shortest round-trip decimals, so reloading
//! reproduces every parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::memory::{BundleRecord, TaskBundle, TaskKeyMemory, TaskRegistry};
use crate::model::{CmmlModel, ModelSettings};

pub const CHECKPOINT_FORMAT: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const KEYS_FILE: &str = "keys.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestTask {
    pub task_id: u32,
    pub num_classes: usize,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub tasks: Vec<ManifestTask>,
    pub keys_file: String,
}

fn safe_file_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && !name.starts_with('.')
}

impl Manifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        if m.format_version != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!(
                "manifest format {} is not supported",
                m.format_version
            )));
        }
        m.config.validate()?;
        if m.config.hash() != m.config_hash {
            return Err(Error::CheckpointMismatch("manifest config does not match its hash".into()));
        }
        for (i, t) in m.tasks.iter().enumerate() {
            if t.task_id as usize != i + 1 {
                return Err(Error::Format(format!("manifest task {} is out of order", i + 1)));
            }
            if !safe_file_name(&t.file) {
                return Err(Error::Format(format!("manifest file name {:?} is not allowed", t.file)));
            }
        }
        if !safe_file_name(&m.keys_file) {
            return Err(Error::Format(format!("key file name {:?} is not allowed", m.keys_file)));
        }
        Ok(m)
    }
}

pub fn bundle_from_json(text: &str) -> Result<BundleRecord> {
    serde_json::from_str(text).map_err(|e| Error::Format(format!("bundle: {e}")))
}

pub fn keys_from_json(text: &str) -> Result<TaskKeyMemory> {
    let k: TaskKeyMemory = serde_json::from_str(text).map_err(|e| Error::Format(format!("keys: {e}")))?;
    if !(k.beta > 0.0 && k.beta < 1.0) {
        return Err(Error::Format("keys: momentum outside (0, 1)".into()));
    }
    Ok(k)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(model: &CmmlModel, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    if !model.registry.all_frozen() {
        return Err(Error::Registry("only fully frozen models can be checkpointed".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tasks = Vec::new();
    for b in model.registry.bundles() {
        let file = format!("task_{}.json", b.task_id);
        let json = serde_json::to_string(&b.to_record()).expect("bundle serializes");
        write(&dir.join(&file), &json)?;
        tasks.push(ManifestTask {
            task_id: b.task_id,
            num_classes: b.num_classes(),
            file,
        });
    }
    write(
        &dir.join(KEYS_FILE),
        &serde_json::to_string(&model.keys).expect("keys serialize"),
    )?;
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        tasks,
        keys_file: KEYS_FILE.to_string(),
    };
    write(
        &dir.join(MANIFEST_FILE),
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
}

/// Restores a frozen model. When `expected` is given its hash must match
/// the one recorded in the manifest.
pub fn load_checkpoint(dir: &Path, expected: Option<&ExperimentConfig>) -> Result<(CmmlModel, ExperimentConfig)> {
    let manifest = Manifest::from_json(&read(&dir.join(MANIFEST_FILE))?)?;
    if let Some(cfg) = expected {
        if cfg.hash() != manifest.config_hash {
            return Err(Error::CheckpointMismatch(format!(
                "config hash {} differs from checkpoint {}",
                cfg.hash(),
                manifest.config_hash
            )));
        }
    }
    let cfg = manifest.config;
    let mut model = CmmlModel::new(&cfg)?;
    let mut registry = TaskRegistry::new();
    for t in &manifest.tasks {
        let rec = bundle_from_json(&read(&dir.join(&t.file))?)?;
        if rec.task_id != t.task_id || rec.num_classes != t.num_classes {
            return Err(Error::CheckpointMismatch(format!("{} disagrees with the manifest", t.file)));
        }
        if rec.adapters_kind() != cfg.adapters.variant.adapter_kind() {
            return Err(Error::CheckpointMismatch(format!("{} holds a different adapter kind", t.file)));
        }
        let bundle = TaskBundle::from_record(rec, model.backbone.config(), cfg.adapters.rank)?;
        registry.register_task(bundle)?;
        registry.freeze_current();
    }
    let keys = keys_from_json(&read(&dir.join(&manifest.keys_file))?)?;
    let d = model.backbone.config().d_model;
    let ids: Vec<u32> = keys.keys().map(|(k, _)| k).collect();
    let expected_ids: Vec<u32> = manifest.tasks.iter().map(|t| t.task_id).collect();
    if ids != expected_ids || keys.keys().any(|(_, v)| v.len() != d) {
        return Err(Error::CheckpointMismatch("task keys do not match the stored tasks".into()));
    }
    model.registry = registry;
    model.keys = keys;
    model.settings = ModelSettings::from_config(&cfg);
    Ok((model, cfg))
}
