//! Run manifests: what was run, with which parameters, and what it wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::Failure;

pub const TOOL: &str = "probreach";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

impl FileHash {
    pub fn of(path: &Path) -> Result<Self, Failure> {
        let data = fs::read(path)
            .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_hex(&data),
            bytes: data.len() as u64,
        })
    }
}

pub fn sha256_hex(data: &[u8]) -> String {
    Sha256::digest(data)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Arguments after the program name; replaying them from `cwd` reruns
    /// the command.
    pub argv: Vec<String>,
    pub cwd: PathBuf,
    /// Every parameter after defaults were filled in.
    pub parameters: Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileHash>,
    pub artifacts: Vec<FileHash>,
    /// Headline numbers of the run, for quick inspection.
    pub summary: Value,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Failure::Usage(format!("{} is not a manifest: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(self).map_err(probreach::Error::from)?;
        text.push('\n');
        fs::write(path, text)
            .map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))
    }
}

/// Files a command read and wrote, gathered while it runs.
#[derive(Debug, Default)]
pub struct Record {
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    pub artifacts: Vec<PathBuf>,
    pub summary: BTreeMap<String, Value>,
}

impl Record {
    pub fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.to_string(), seed);
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn summarize(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        self.summary.insert(key.to_string(), v);
    }

    /// Writes `data` to `path` and remembers it as an artifact.
    pub fn write(&mut self, path: &Path, data: &[u8]) -> Result<(), Failure> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)
                .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))?;
        }
        fs::write(path, data)
            .map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))?;
        self.artifacts.push(path.to_path_buf());
        Ok(())
    }

    pub fn write_json(&mut self, path: &Path, value: &impl Serialize) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(value).map_err(probreach::Error::from)?;
        text.push('\n');
        self.write(path, text.as_bytes())
    }

    pub fn into_manifest(
        self,
        command: &str,
        argv: Vec<String>,
        cwd: PathBuf,
        parameters: Value,
    ) -> Result<Manifest, Failure> {
        let hash_all = |paths: Vec<PathBuf>| -> Result<Vec<FileHash>, Failure> {
            let mut out = paths
                .iter()
                .map(|p| FileHash::of(p))
                .collect::<Result<Vec<_>, _>>()?;
            out.sort();
            out.dedup();
            Ok(out)
        };
        Ok(Manifest {
            tool: TOOL.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            argv,
            cwd,
            parameters,
            seeds: self.seeds,
            inputs: hash_all(self.inputs)?,
            artifacts: hash_all(self.artifacts)?,
            summary: serde_json::to_value(self.summary).unwrap_or(Value::Null),
        })
    }
}

/// Paths whose current content differs from the recorded hash.
pub fn changed(files: &[FileHash]) -> Vec<PathBuf> {
    files
        .iter()
        .filter(|f| FileHash::of(&f.path).map_or(true, |now| now.sha256 != f.sha256))
        .map(|f| f.path.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
