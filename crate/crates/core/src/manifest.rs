//! Run manifests: what a command was run with and what it read and wrote.
//!
//! A manifest is written next to every output. Input digests recorded by an
//! upstream command are checked by downstream commands so that draws are
//! never combined with data they were not fitted to.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::InputPaths;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad manifest {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("input `{file}` changed since it was recorded (recorded {recorded}, now {current})")]
    DigestMismatch {
        file: String,
        recorded: String,
        current: String,
    },
    #[error("input `{0}` is not recorded in the upstream manifest")]
    Unrecorded(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Every setting the command ran with, defaults included.
    pub config: serde_json::Value,
    pub config_hash: String,
    /// File name to sha256 of the inputs read.
    pub inputs: BTreeMap<String, String>,
    /// File name to sha256 of the outputs written.
    pub outputs: BTreeMap<String, String>,
    pub seed: u64,
    pub version: String,
    /// Unix seconds.
    pub started: u64,
    pub finished: u64,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config_hash: hash_config(&config),
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started: now(),
            finished: 0,
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<(), ManifestError> {
        self.inputs.insert(file_key(path), sha256_file(path)?);
        Ok(())
    }

    pub fn record_inputs(&mut self, paths: &InputPaths) -> Result<(), ManifestError> {
        for p in paths.all() {
            self.record_input(p)?;
        }
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) -> Result<(), ManifestError> {
        self.outputs.insert(file_key(path), sha256_file(path)?);
        Ok(())
    }

    /// Stamp the finish time and write atomically.
    pub fn write(&mut self, path: &Path) -> Result<(), ManifestError> {
        self.finished = now();
        let mut text = serde_json::to_string_pretty(self).map_err(|e| ManifestError::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path).map_err(io_at(path))?;
        serde_json::from_str(&text).map_err(|e| ManifestError::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Check that every current input matches the digest recorded upstream.
pub fn verify_inputs(recorded: &BTreeMap<String, String>, paths: &InputPaths) -> Result<(), ManifestError> {
    for p in paths.all() {
        let key = file_key(p);
        let expected = recorded
            .get(&key)
            .ok_or_else(|| ManifestError::Unrecorded(key.clone()))?;
        let current = sha256_file(p)?;
        if *expected != current {
            return Err(ManifestError::DigestMismatch {
                file: key,
                recorded: expected.clone(),
                current,
            });
        }
    }
    Ok(())
}

/// Manifest path for an output file (`draws.csv` → `draws.csv.manifest.json`).
pub fn manifest_path_for(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

pub fn sha256_file(path: &Path) -> Result<String, ManifestError> {
    let bytes = std::fs::read(path).map_err(io_at(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn hash_config(config: &serde_json::Value) -> String {
    // serde_json maps are sorted, so the encoding is canonical
    hex::encode(Sha256::digest(config.to_string().as_bytes()))
}

/// Write to a temporary file in the same directory, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ManifestError> {
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result.map_err(io_at(path))
}

fn file_key(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> ManifestError + '_ {
    move |source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    }
}
