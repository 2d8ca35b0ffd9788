//! Per-command record of what was read, what was written and how long it took.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io::{content_hash, read_file, write_atomic};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the output directory for outputs; as given for inputs.
    pub path: String,
    pub hash: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: String) -> Self {
        Self {
            command: command.to_string(),
            config_hash,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        let bytes = read_file(path)?;
        self.inputs.push(FileEntry {
            path: path.display().to_string(),
            hash: content_hash(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    /// Writes `bytes` atomically under `out` and records it.
    pub fn output(&mut self, out: &Path, rel: impl AsRef<Path>, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = out.join(rel.as_ref());
        write_atomic(&path, bytes)?;
        self.record_output(out, &path, bytes);
        Ok(path)
    }

    /// Records a file that is already on disk.
    pub fn existing_output(&mut self, out: &Path, path: &Path) -> CliResult<()> {
        let bytes = read_file(path)?;
        self.record_output(out, path, &bytes);
        Ok(())
    }

    fn record_output(&mut self, out: &Path, path: &Path, bytes: &[u8]) {
        let rel = path.strip_prefix(out).unwrap_or(path);
        let rel = rel.to_string_lossy().replace('\\', "/");
        self.outputs.retain(|e| e.path != rel);
        self.outputs.push(FileEntry {
            path: rel,
            hash: content_hash(bytes),
            bytes: bytes.len() as u64,
        });
    }

    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let v = f();
        *self.timings.entry(stage.to_string()).or_default() += start.elapsed().as_secs_f64();
        v
    }

    pub fn hash_of(&self, rel: &str) -> Option<&str> {
        self.outputs.iter().find(|e| e.path == rel).map(|e| e.hash.as_str())
    }

    /// Sorts outputs and writes the manifest itself into `out`.
    pub fn write(mut self, out: &Path) -> CliResult<RunManifest> {
        self.outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let json = serde_json::to_vec_pretty(&self).expect("manifest serializes");
        write_atomic(&out.join(RUN_MANIFEST), &json)?;
        Ok(self)
    }

    pub fn read(out: &Path) -> CliResult<RunManifest> {
        let path = out.join(RUN_MANIFEST);
        serde_json::from_slice(&read_file(&path)?).map_err(|e| CliError::io(&path, e))
    }

    /// Outputs whose file on disk is missing or no longer matches its hash.
    pub fn mismatches(&self, out: &Path) -> Vec<String> {
        self.outputs
            .iter()
            .filter(|e| match std::fs::read(out.join(&e.path)) {
                Ok(bytes) => content_hash(&bytes) != e.hash,
                Err(_) => true,
            })
            .map(|e| e.path.clone())
            .collect()
    }
}
