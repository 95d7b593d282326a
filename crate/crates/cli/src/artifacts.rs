//! Output directory handling and the run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::inputs::InputFiles;
use crate::CliError;

pub struct Artifacts {
    dir: PathBuf,
    written: Vec<String>,
}

impl Artifacts {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    /// Runs a CSV writer into memory, then stores the bytes.
    pub fn write_csv(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Vec<u8>) -> sfe_core::Result<()>,
    ) -> Result<(), CliError> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write_bytes(name, &buf)
    }

    pub fn names(&self) -> &[String] {
        &self.written
    }
}

#[derive(Debug, Serialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub inputs: BTreeMap<String, InputRecord>,
    pub parameters: BTreeMap<String, String>,
    pub artifacts: Vec<String>,
    pub converged: bool,
    pub wall_time_seconds: f64,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn input_records(files: &InputFiles) -> Result<BTreeMap<String, InputRecord>, CliError> {
    files
        .files
        .iter()
        .map(|(key, raw, path)| {
            Ok((
                key.clone(),
                InputRecord {
                    path: raw.clone(),
                    sha256: sha256_file(path)?,
                },
            ))
        })
        .collect()
}
