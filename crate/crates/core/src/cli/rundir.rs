//! Run directory: manifest, advisory lock, content-addressed checkpoints,
//! metrics table, and other artifacts.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::{decode, encode, ModelKind};
use crate::diffnet::ParamStore;
use crate::error::{Error, Result};
use crate::evalsuite::{MetricsRow, METRICS_HEADER};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.toml";
pub const METRICS: &str = "metrics.csv";
pub const LOCK: &str = ".lock";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Loss settings that produced a checkpoint; recorded in metrics rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTag {
    pub loss_kind: String,
    pub tau: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl StageTag {
    pub fn none() -> Self {
        StageTag {
            loss_kind: "NONE".into(),
            tau: 1.0,
            beta: 0.0,
            gamma: 0.0,
        }
    }
}

/// A checkpoint registered in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub stage: String,
    pub steps: usize,
    pub kind: String,
    pub file: String,
    pub sha256: String,
    pub tag: StageTag,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    /// Registration order; later entries win lookups.
    pub checkpoints: Vec<CheckpointEntry>,
    /// Relative path to sha256 of every other artifact.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    /// Most recently registered checkpoint matching the filter.
    pub fn find(&self, kind: ModelKind, stage: Option<&str>, steps: Option<usize>) -> Option<&CheckpointEntry> {
        self.checkpoints.iter().rev().find(|e| {
            e.kind == kind.name() && stage.is_none_or(|s| e.stage == s) && steps.is_none_or(|n| e.steps == n)
        })
    }
}

/// Held while a subcommand owns the directory.
#[derive(Debug)]
struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    pub manifest: Manifest,
    _lock: LockGuard,
}

impl RunDir {
    /// Creates the directory if needed and takes the advisory lock.
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root.join("checkpoints"))?;
        fs::create_dir_all(root.join("figures"))?;
        let lock_path = root.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&lock_path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::Locked(lock_path.display().to_string()));
            }
            Err(e) => return Err(e.into()),
        }
        let guard = LockGuard(lock_path);
        let manifest_path = root.join(MANIFEST);
        let manifest = if manifest_path.exists() {
            serde_json::from_str(&fs::read_to_string(&manifest_path)?)
                .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?
        } else {
            Manifest::default()
        };
        Ok(RunDir {
            root: root.to_path_buf(),
            manifest,
            _lock: guard,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn save_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(self.root.join(MANIFEST), text + "\n")?;
        Ok(())
    }

    /// Writes an artifact and records its checksum.
    pub fn write_artifact(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.manifest.artifacts.insert(rel.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    /// Stores a checkpoint under `{stage}-{steps}step-{hash8}.rcfd`. An
    /// identical existing file is reused rather than rewritten.
    pub fn store_checkpoint(
        &mut self,
        stage: &str,
        steps: usize,
        kind: ModelKind,
        tag: StageTag,
        params: &ParamStore,
    ) -> Result<CheckpointEntry> {
        let bytes = encode(kind, params)?;
        let digest = sha256_hex(&bytes);
        let file = format!("checkpoints/{stage}-{steps}step-{}.rcfd", &digest[..8]);
        let path = self.root.join(&file);
        if !path.exists() {
            fs::write(&path, &bytes)?;
        } else if sha256_hex(&fs::read(&path)?) != digest {
            return Err(Error::Format(format!(
                "{file} exists with different contents; refusing to overwrite"
            )));
        }
        let entry = CheckpointEntry {
            stage: stage.to_string(),
            steps,
            kind: kind.name().to_string(),
            file,
            sha256: digest,
            tag,
        };
        self.manifest.checkpoints.retain(|e| e.file != entry.file);
        self.manifest.checkpoints.push(entry.clone());
        Ok(entry)
    }

    /// Reads a registered checkpoint and checks it against the manifest.
    pub fn read_checkpoint(&self, entry: &CheckpointEntry) -> Result<ParamStore> {
        let path = self.root.join(&entry.file);
        if !path.exists() {
            return Err(Error::Prerequisite(format!("checkpoint {} is missing from disk", entry.file)));
        }
        let bytes = fs::read(&path)?;
        let kind = if entry.kind == ModelKind::Classifier.name() {
            ModelKind::Classifier
        } else {
            ModelKind::Denoiser
        };
        let params = decode(&bytes, kind)?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::Format(format!("{} does not match its manifest checksum", entry.file)));
        }
        Ok(params)
    }

    pub fn append_metrics(&mut self, rows: &[MetricsRow]) -> Result<()> {
        let path = self.root.join(METRICS);
        let mut text = if path.exists() {
            fs::read_to_string(&path)?
        } else {
            format!("{METRICS_HEADER}\n")
        };
        for r in rows {
            text.push_str(&r.to_csv_line());
            text.push('\n');
        }
        self.write_artifact(METRICS, text.as_bytes())?;
        Ok(())
    }

    pub fn read_metrics(&self) -> Result<Option<String>> {
        let path = self.root.join(METRICS);
        if path.exists() {
            Ok(Some(fs::read_to_string(path)?))
        } else {
            Ok(None)
        }
    }
}
