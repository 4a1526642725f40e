//! Run directories: atomic artifact writes plus a `run.json` manifest.

use std::path::{Path, PathBuf};

use msyolo::io::write_atomic;
use msyolo::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Serialize)]
pub struct FileHash {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<FileHash> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(FileHash {
        path: path.display().to_string(),
        bytes: bytes.len() as u64,
        sha256: sha256_hex(&bytes),
    })
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    argv: &'a [String],
    version: &'static str,
    seed: Option<u64>,
    config: Option<&'a str>,
    inputs: &'a [FileHash],
    artifacts: &'a [FileHash],
}

/// Collects the artifacts of one subcommand.
pub struct Run {
    pub out: PathBuf,
    command: String,
    argv: Vec<String>,
    pub seed: Option<u64>,
    pub config: Option<String>,
    inputs: Vec<FileHash>,
    artifacts: Vec<FileHash>,
}

impl Run {
    pub fn new(command: &str, out: Option<PathBuf>, argv: &[String]) -> Self {
        Run {
            out: out.unwrap_or_else(|| Path::new("runs").join(command)),
            command: command.to_string(),
            argv: argv.to_vec(),
            seed: None,
            config: None,
            inputs: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    /// Records the hash of an input file.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        if path.is_file() {
            self.inputs.push(hash_file(path)?);
        }
        Ok(())
    }

    /// Writes `name` under the run directory and records its hash.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out.join(name);
        write_atomic(&path, bytes)?;
        self.artifacts.push(FileHash {
            path: path.display().to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    /// Records a file written by someone else.
    pub fn record(&mut self, path: &Path) -> Result<()> {
        self.artifacts.push(hash_file(path)?);
        Ok(())
    }

    /// Writes `run.json`.
    pub fn finish(self) -> Result<PathBuf> {
        let m = Manifest {
            command: &self.command,
            argv: &self.argv,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.seed,
            config: self.config.as_deref(),
            inputs: &self.inputs,
            artifacts: &self.artifacts,
        };
        let text = serde_json::to_string_pretty(&m).expect("manifest serialises") + "\n";
        let path = self.out.join("run.json");
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}
