//! Run directories: a lock against concurrent writers, the artifact list,
//! and the manifest written when a command finishes.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use anyhow::Context;
use discon::pipeline::checkpoint::{hash_bytes, hash_file};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.csv";
pub const LOCK: &str = ".lock";

/// Paths a command reads, kept verbatim so a manifest can be replayed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub data: Option<PathBuf>,
    pub tokenizer: Option<PathBuf>,
    pub prior: Option<PathBuf>,
    /// `(id, path)` pairs; a single unnamed checkpoint has id `discon`.
    pub discon: Vec<(String, PathBuf)>,
    pub resume: Option<PathBuf>,
    pub from: Option<PathBuf>,
    pub kind: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config: Config,
    pub inputs: Inputs,
    /// Hash of every input file, keyed by path.
    pub input_hashes: BTreeMap<String, String>,
    /// Hash of every file the command wrote, keyed by path relative to the
    /// run directory.
    pub artifacts: BTreeMap<String, String>,
    pub tool_version: String,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

/// Identifier derived from what determines a run's outputs, so replaying a
/// manifest reproduces the same id.
pub fn run_id(command: &str, config: &Config, input_hashes: &BTreeMap<String, String>) -> String {
    let canon = serde_json::json!({
        "command": command,
        "config": config,
        "inputs": input_hashes.values().collect::<Vec<_>>(),
    });
    hash_bytes(canon.to_string().as_bytes())[..12].to_string()
}

pub struct RunDir {
    root: PathBuf,
    artifacts: BTreeMap<String, String>,
    lock: PathBuf,
}

impl RunDir {
    /// Creates (if needed) and locks `root`.
    pub fn open(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).with_context(|| format!("creating run directory {}", root.display()))?;
        let lock = root.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(CliError::Runtime(anyhow::anyhow!(
                    "run directory {} is in use (remove {} if no command is running)",
                    root.display(),
                    lock.display()
                )))
            }
            Err(e) => return Err(CliError::Runtime(anyhow::Error::new(e).context("creating lock file"))),
        }
        Ok(Self {
            root: root.to_path_buf(),
            artifacts: BTreeMap::new(),
            lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Writes `bytes` to `rel` and records it as an artifact.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> anyhow::Result<PathBuf> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
        self.artifacts.insert(rel.to_string(), hash_bytes(bytes));
        Ok(p)
    }

    /// Records a file written by other code (checkpoint savers).
    pub fn record(&mut self, rel: &str) -> anyhow::Result<()> {
        let h = hash_file(&self.path(rel)).with_context(|| format!("hashing {rel}"))?;
        self.artifacts.insert(rel.to_string(), h);
        Ok(())
    }

    pub fn finish(mut self, mut manifest: RunManifest) -> anyhow::Result<RunManifest> {
        manifest.artifacts = std::mem::take(&mut self.artifacts);
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(self.path(MANIFEST), text + "\n")?;
        Ok(manifest)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, CliError> {
    let f = File::open(path).map_err(|e| CliError::Validation(format!("cannot read manifest {}: {e}", path.display())))?;
    serde_json::from_reader(f).map_err(|e| CliError::Validation(format!("manifest {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_open_is_refused_until_the_first_drops() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunDir::open(dir.path()).unwrap();
        assert!(RunDir::open(dir.path()).is_err());
        drop(a);
        assert!(RunDir::open(dir.path()).is_ok());
    }

    #[test]
    fn run_id_ignores_nothing_that_matters() {
        let c = Config::default();
        let h = BTreeMap::from([("a".to_string(), "x".to_string())]);
        let base = run_id("eval", &c, &h);
        assert_eq!(base, run_id("eval", &c, &h));
        assert_ne!(base, run_id("sample", &c, &h));
        let h2 = BTreeMap::from([("a".to_string(), "y".to_string())]);
        assert_ne!(base, run_id("eval", &c, &h2));
    }
}
