//! On-disk run directory: layout, lock and manifest.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use lgd_core::distill::StageRecord;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const LOCK: &str = ".lgd.lock";
pub const CONFIG: &str = "config.toml";

pub const TRAIN_CSV: &str = "data/train.csv";
pub const TEST_CSV: &str = "data/test.csv";
pub const REFERENCE: &str = "models/reference";
pub const PREDICTOR: &str = "models/predictor";
pub const DISTILLED_CSV: &str = "distill/distilled.csv";
pub const SELECTION_CSV: &str = "distill/selection.csv";
pub const TRAIN_LOG_CSV: &str = "distill/train_log.csv";
pub const STAGES_JSON: &str = "distill/stages.json";

/// Exclusive handle on a run directory; the lock file is removed on drop.
pub struct RunDir {
    root: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)
            .map_err(|e| CliError::config(format!("cannot create run directory {}: {e}", root.display())))?;
        let lock = root.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(CliError::runtime(format!(
                    "run directory {} is locked by another process (remove {} if no run is active)",
                    root.display(),
                    lock.display()
                )));
            }
            Err(e) => return Err(e.into()),
        }
        Ok(Self {
            root: root.to_path_buf(),
            lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    /// Creates parent directories and returns a writable file.
    pub fn create(&self, rel: &str) -> Result<File> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(File::create(p)?)
    }

    pub fn write_bytes(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        self.create(rel)?.write_all(bytes)?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_bytes(rel, text.as_bytes())
    }

    /// Fails with a configuration error naming the command that produces
    /// each missing file.
    pub fn require(&self, needed: &[(&str, &str)]) -> Result<()> {
        let missing: Vec<String> = needed
            .iter()
            .filter(|(rel, _)| !self.exists(rel))
            .map(|(rel, cmd)| format!("{} (run `lgd {cmd}` first)", self.path(rel).display()))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(CliError::config(format!("missing inputs: {}", missing.join(", "))))
        }
    }

    pub fn read_manifest(&self) -> Result<Option<RunManifest>> {
        let p = self.path(MANIFEST);
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&fs::read(p)?)?))
    }

    /// Rewrites the manifest: refreshes the config, records `timing` for
    /// `command`, applies `update`, and rehashes every file in the directory.
    pub fn update_manifest(
        &self,
        cfg: &RunConfig,
        command: &str,
        seconds: f64,
        update: impl FnOnce(&mut RunManifest),
    ) -> Result<RunManifest> {
        let mut m = self.read_manifest()?.unwrap_or_default();
        m.tool = env!("CARGO_PKG_NAME").to_string();
        m.tool_version = env!("CARGO_PKG_VERSION").to_string();
        m.config_hash = cfg.hash()?;
        m.data_hash = cfg.data_hash()?;
        m.master_seed = cfg.seed;
        m.data_seed = cfg.data.seed;
        m.config = cfg.to_toml()?;
        m.timing.insert(command.to_string(), seconds);
        update(&mut m);
        m.files = inventory(&self.root)?;
        self.write_json(MANIFEST, &m)?;
        Ok(m)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StaticEval {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    /// SHA-256 of the canonical config text in `config`.
    pub config_hash: String,
    pub data_hash: String,
    pub master_seed: u64,
    pub data_seed: u64,
    pub config: String,
    pub method: Option<String>,
    pub reference_test_accuracy: Option<f64>,
    /// Incremental learner metrics, one record per stage.
    pub stages: Vec<StageRecord>,
    pub static_eval: Option<StaticEval>,
    pub reports: Vec<String>,
    /// Wall-clock seconds of the latest invocation of each command.
    pub timing: BTreeMap<String, f64>,
    /// Relative path to SHA-256 of every file in the run directory.
    pub files: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Hashes of every regular file under `root` except the manifest and lock.
pub fn inventory(root: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path
                .strip_prefix(root)
                .expect("walked from root")
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            if rel == MANIFEST || rel == LOCK {
                continue;
            }
            out.insert(rel, sha256_file(&path)?);
        }
    }
    Ok(out)
}
