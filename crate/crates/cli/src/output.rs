//! Staged output files and the run manifest.
//!
//! Commands build every output in memory, then [`Staged::commit`] writes
//! them. The manifest goes last, so a directory whose manifest says `ok`
//! holds complete outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    /// Input path → sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output path (relative to the run directory) → sha256.
    pub outputs: BTreeMap<String, String>,
    pub timestamp: String,
    pub version: String,
}

/// Provenance for one command invocation.
pub struct Run {
    pub command: &'static str,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    inputs: BTreeMap<String, String>,
}

impl Run {
    pub fn new(command: &'static str, seed: Option<u64>, config: impl Serialize) -> Result<Self, CliError> {
        let config = serde_json::to_value(config).map_err(|e| CliError::Check(format!("config: {e}")))?;
        Ok(Self { command, seed, config, inputs: BTreeMap::new() })
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let digest = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    fn manifest(&self, status: &str, error: Option<String>, outputs: BTreeMap<String, String>) -> RunManifest {
        RunManifest {
            command: self.command.to_string(),
            status: status.to_string(),
            error,
            seed: self.seed,
            config: self.config.clone(),
            inputs: self.inputs.clone(),
            outputs,
            timestamp: chrono::Utc::now().to_rfc3339(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    /// Records a failed run in `dir` if the directory already exists. Best effort.
    pub fn record_failure(&self, dir: &Path, err: &CliError) {
        if dir.is_dir() {
            let m = self.manifest("failed", Some(err.to_string()), BTreeMap::new());
            if let Ok(text) = serde_json::to_string_pretty(&m) {
                let _ = fs::write(dir.join(MANIFEST), text + "\n");
            }
        }
    }
}

#[derive(Default)]
pub struct Staged {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Staged {
    pub fn add(&mut self, rel: impl Into<PathBuf>, bytes: impl Into<Vec<u8>>) {
        self.files.push((rel.into(), bytes.into()));
    }

    pub fn add_with<F>(&mut self, rel: impl Into<PathBuf>, write: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut Vec<u8>) -> hsadapt::Result<()>,
    {
        let mut buf = Vec::new();
        write(&mut buf)?;
        self.add(rel, buf);
        Ok(())
    }

    /// Writes every file, then the manifest. On failure, files written by
    /// this call are removed again.
    pub fn commit(self, dir: &Path, run: &Run) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let mut written: Vec<PathBuf> = Vec::new();
        let result = (|| {
            let mut outputs = BTreeMap::new();
            for (rel, bytes) in &self.files {
                let path = dir.join(rel);
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
                }
                written.push(path.clone());
                fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
                outputs.insert(rel.display().to_string(), hex::encode(Sha256::digest(bytes)));
            }
            let text = serde_json::to_string_pretty(&run.manifest("ok", None, outputs))
                .map_err(|e| CliError::Check(format!("manifest: {e}")))?;
            let path = dir.join(MANIFEST);
            written.push(path.clone());
            fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
        })();
        if result.is_err() {
            for p in &written {
                let _ = fs::remove_file(p);
            }
        }
        result
    }
}
