//! Run manifests: every artifact-producing command records its resolved
//! configuration, seed, and input/output paths beside its outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub tool_version: String,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            duration_secs: 0.0,
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Writes `manifest.json` into `dir` and returns its path.
    pub fn write_in_dir(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    /// Writes `<file>.manifest.json` next to a single output file.
    pub fn write_beside(&self, file: &Path) -> Result<PathBuf> {
        let name = match file.file_name() {
            Some(n) => format!("{}.manifest.json", n.to_string_lossy()),
            None => "manifest.json".to_string(),
        };
        let path = file.with_file_name(name);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("corpus-gen", serde_json::json!({"seed": 3}), 3);
        m.input(Path::new("in.txt"));
        m.output(Path::new("out.txt"));
        let path = m.write_in_dir(dir.path()).unwrap();
        let loaded = RunManifest::load(&path).unwrap();
        assert_eq!(loaded.command, "corpus-gen");
        assert_eq!(loaded.seed, 3);
        assert_eq!(loaded.inputs, vec!["in.txt"]);
        assert_eq!(loaded.tool_version, env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn manifest_beside_file() {
        let dir = tempfile::tempdir().unwrap();
        let report = dir.path().join("report.json");
        let m = RunManifest::new("seat", serde_json::json!({}), 0);
        let path = m.write_beside(&report).unwrap();
        assert_eq!(path.file_name().unwrap(), "report.json.manifest.json");
        assert!(path.exists());
    }
}
