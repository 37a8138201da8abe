//! Run manifests: enough to rerun a command and to tell whether the rerun
//! saw the same inputs and produced the same outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gaflow::config::TrainConfig;
use gaflow::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(FileDigest {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub command: String,
    /// Arguments after the program name; feeding them back reruns the command.
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    /// Resolved training config: the one trained with, or the checkpoint's.
    pub config: Option<TrainConfig>,
    pub parallel: bool,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

impl Manifest {
    pub fn new(command: &str, argv: Vec<String>, parallel: bool) -> Self {
        Manifest {
            manifest_version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            argv,
            seed: None,
            config: None,
            parallel,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Contract(format!("manifest serialization: {e}")))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: not a run manifest: {e}", path.display())))?;
        if m.manifest_version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "{}: manifest version {} is not supported (expected {MANIFEST_VERSION})",
                path.display(),
                m.manifest_version
            )));
        }
        Ok(m)
    }

    /// Fails unless every recorded input still has its recorded digest.
    pub fn verify_inputs(&self) -> Result<()> {
        for d in &self.inputs {
            let now = sha256_file(&d.path)?;
            if now != d.sha256 {
                return Err(Error::Contract(format!(
                    "input {} changed since the recorded run (sha256 {} now {})",
                    d.path.display(),
                    short(&d.sha256),
                    short(&now)
                )));
            }
        }
        Ok(())
    }

    /// Outputs of `self` whose digest differs from the same path in `other`.
    pub fn differing_outputs(&self, other: &Manifest) -> Vec<PathBuf> {
        self.outputs
            .iter()
            .filter(|d| !other.outputs.iter().any(|o| o.path == d.path && o.sha256 == d.sha256))
            .map(|d| d.path.clone())
            .collect()
    }
}

fn short(hex: &str) -> &str {
    &hex[..hex.len().min(12)]
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// `<path>.<suffix>`, keeping the original extension in the name.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}
