//! Per-command manifest: config echo, build identity and content hashes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const GIT_DESCRIBE: &str = env!("EVOLQ_GIT_DESCRIBE");

#[derive(Debug, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub git_describe: String,
    pub config: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn new(command: &str, config: &impl Serialize) -> CliResult<Self> {
        Ok(Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            git_describe: GIT_DESCRIBE.to_string(),
            config: serde_json::to_value(config).map_err(|e| CliError::config(e.to_string()))?,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.push(FileHash {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> CliResult<()> {
        self.outputs.push(FileHash {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    /// Writes `<dir>/<command>-manifest.json` and returns its path.
    pub fn write(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = dir.join(format!("{}-manifest.json", self.command));
        write_json(&path, self)?;
        Ok(path)
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::config(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}
