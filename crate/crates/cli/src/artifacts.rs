//! Output staging and the run manifest.
//!
//! Every artifact is first written as `<name>.partial`. Only when the whole
//! command succeeds are the files renamed into place, followed by the
//! configuration echo and `manifest.json`. A failed run leaves its
//! `.partial` files behind for inspection.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";
const PARTIAL: &str = ".partial";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Wall-clock fields; the only parts that differ between identical runs.
    pub started_at_unix: u64,
    pub wall_time_seconds: f64,
}

/// Write `bytes` to `path` through a `.partial` sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let partial = partial_path(path);
    fs::write(&partial, bytes).map_err(|e| CliError::io(&partial, e))?;
    fs::rename(&partial, path).map_err(|e| CliError::io(path, e))
}

fn partial_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(PARTIAL);
    PathBuf::from(s)
}

/// Collects a command's outputs under one root directory.
pub struct Staging {
    root: PathBuf,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    started: Instant,
    started_at_unix: u64,
}

impl Staging {
    /// Nothing touches the file system until the first [`Staging::put`].
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
            started_at_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn record_input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
    }

    /// Stage `bytes` as `rel` (a `/`-separated path below the root).
    pub fn put(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        if self.outputs.iter().any(|f| f.path == rel) {
            return Err(CliError::Usage(format!("artifact {rel} written twice")));
        }
        let target = self.root.join(rel);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        let partial = partial_path(&target);
        fs::write(&partial, bytes).map_err(|e| CliError::io(&partial, e))?;
        self.outputs.push(FileDigest {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn put_all(&mut self, prefix: &str, files: &[(String, Vec<u8>)]) -> Result<(), CliError> {
        for (name, bytes) in files {
            self.put(&join_rel(prefix, name), bytes)?;
        }
        Ok(())
    }

    /// Move every staged file into place and write the config echo and the
    /// manifest.
    pub fn commit(mut self, command: &str, seed: u64, config_echo: &str) -> Result<Manifest, CliError> {
        self.put(crate::config::CONFIG_ECHO, config_echo.as_bytes())?;
        for f in &self.outputs {
            let target = self.root.join(&f.path);
            let partial = partial_path(&target);
            fs::rename(&partial, &target).map_err(|e| CliError::io(&target, e))?;
        }
        let manifest = Manifest {
            tool: "lmp".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            config_sha256: sha256_hex(config_echo.as_bytes()),
            inputs: self.inputs,
            outputs: self.outputs,
            started_at_unix: self.started_at_unix,
            wall_time_seconds: self.started.elapsed().as_secs_f64(),
        };
        let json = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Params(e.to_string()))?;
        write_atomic(&self.root.join(MANIFEST), &json)?;
        Ok(manifest)
    }
}

pub fn join_rel(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}
