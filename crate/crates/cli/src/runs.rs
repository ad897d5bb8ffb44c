//! Run directories, artifact files and checksummed manifests.

use std::fs;
use std::path::{Path, PathBuf};

use mmkd::checkpoint::Checkpoint;
use mmkd::metrics::MetricsReport;
use mmkd::models::{Modality, ModalityModel};
use mmkd::synthdata::{Shard, Splits};
use mmkd::training::TrainLog;
use mmkd::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "model.ckpt";
pub const LOG: &str = "log.jsonl";
pub const METRICS: &str = "metrics.json";
pub const SPLITS: [&str; 3] = ["train", "holdout", "val"];

/// Layout of an output directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn shard(&self, split: &str) -> PathBuf {
        self.data_dir().join(format!("{split}.shard"))
    }

    pub fn teacher_dir(&self, m: Modality) -> PathBuf {
        self.root.join("teachers").join(m.name())
    }

    pub fn baseline_dir(&self) -> PathBuf {
        self.root.join("baseline")
    }

    pub fn omnivore_dir(&self) -> PathBuf {
        self.root.join("omnivore")
    }

    pub fn weights_file(&self) -> PathBuf {
        self.root.join("weights").join("weights.json")
    }

    pub fn student_dir(&self, lambda: f32, gamma: f64) -> PathBuf {
        self.root.join("students").join(cell_label(lambda, Some(gamma)))
    }

    pub fn sweep_dir(&self) -> PathBuf {
        self.root.join("sweep")
    }

    pub fn load_splits(&self) -> Result<Splits> {
        let load = |split: &str| {
            let path = self.shard(split);
            if !path.exists() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("missing shard {} (run gen-data first)", path.display()),
                )));
            }
            Shard::load(&path)
        };
        Ok(Splits {
            train: load("train")?,
            holdout: load("holdout")?,
            val: load("val")?,
        })
    }
}

/// Directory-safe name of a (λ, γ) cell.
pub fn cell_label(lambda: f32, gamma: Option<f64>) -> String {
    match gamma {
        Some(g) if lambda > 0.0 => format!("lambda{lambda}_gamma{g}"),
        _ => format!("lambda{lambda}"),
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<FileEntry>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub meta: serde_json::Value,
}

/// Checksums `names` (relative to `dir`) into `dir/manifest.json`.
pub fn write_manifest(dir: &Path, names: &[&str], meta: serde_json::Value) -> Result<Manifest> {
    let mut files = Vec::with_capacity(names.len());
    for name in names {
        let bytes = fs::read(dir.join(name))?;
        files.push(FileEntry {
            path: name.to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest { files, meta };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Writes checkpoint, training log and final metrics of a trained model.
pub fn save_run(
    dir: &Path,
    model: &ModalityModel,
    log: &TrainLog,
    report: &MetricsReport,
    meta: serde_json::Value,
) -> Result<Manifest> {
    ensure_dir(dir)?;
    model.to_checkpoint().save(&dir.join(CHECKPOINT))?;
    log.write_jsonl(&dir.join(LOG))?;
    write_json(&dir.join(METRICS), report)?;
    write_manifest(dir, &[CHECKPOINT, LOG, METRICS], meta)
}

pub fn load_model(path: &Path) -> Result<ModalityModel> {
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("missing checkpoint {}", path.display()),
        )));
    }
    ModalityModel::from_checkpoint(&Checkpoint::load(path)?)
}
