//! Output directories and their run manifests.

use std::collections::BTreeSet;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: Vec<String>,
    pub seed: u64,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    pub created_unix: u64,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub struct OutDir {
    dir: PathBuf,
    inputs: BTreeSet<PathBuf>,
    outputs: BTreeSet<String>,
}

impl OutDir {
    /// Refuses a directory that already holds a manifest unless `force`.
    pub fn prepare(dir: &Path, force: bool) -> Result<Self, CliError> {
        if dir.join(MANIFEST).exists() && !force {
            return Err(CliError::data(
                "output-exists",
                format!(
                    "{} already holds a run manifest; pass --force to overwrite",
                    dir.display()
                ),
            ));
        }
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(OutDir {
            dir: dir.to_path_buf(),
            inputs: BTreeSet::new(),
            outputs: BTreeSet::new(),
        })
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.insert(path.to_path_buf());
    }

    /// Records a file written by someone else into this directory.
    pub fn produced(&mut self, name: &str) -> PathBuf {
        self.outputs.insert(name.to_string());
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.produced(name);
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| CliError::data("json", e.to_string()))?;
        text.push('\n');
        self.write(name, text)
    }

    pub fn finish(self, command: Vec<String>, seed: u64) -> Result<(), CliError> {
        let inputs = self
            .inputs
            .iter()
            .map(|p| {
                Ok(InputDigest {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let manifest = RunManifest {
            tool: "conceptscope",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            inputs,
            outputs: self.outputs.into_iter().collect(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        };
        let mut text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CliError::data("json", e.to_string()))?;
        text.push('\n');
        let path = self.dir.join(MANIFEST);
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

/// File-name-safe form of a label.
pub fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
