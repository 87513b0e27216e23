use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tweetshift::{Error, Result};

pub const FILE_NAME: &str = "manifest.json";

/// Record of one command invocation, written next to its artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config: serde_json::Value,
    /// sha256 of every input file, keyed by path as given.
    pub inputs: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub artifacts: Vec<String>,
    pub tool_version: String,
    /// Digest of every field above; the timestamp is left out.
    pub repro_hash: String,
    pub timestamp: String,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            command: command.to_owned(),
            config_path: config_path.map(Path::to_path_buf),
            config,
            inputs: BTreeMap::new(),
            seed,
            artifacts: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            repro_hash: String::new(),
            timestamp: String::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let digest = file_sha256(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn artifact(&mut self, name: impl Into<String>) {
        self.artifacts.push(name.into());
    }

    pub fn compute_repro_hash(&self) -> String {
        let body = serde_json::json!({
            "command": self.command,
            "config_path": self.config_path,
            "config": self.config,
            "inputs": self.inputs,
            "seed": self.seed,
            "artifacts": self.artifacts,
            "tool_version": self.tool_version,
        });
        hex::encode(Sha256::digest(body.to_string().as_bytes()))
    }

    /// Stamps the hash and the current time and writes `manifest.json` into
    /// `dir`.
    pub fn write(mut self, dir: &Path) -> Result<Self> {
        self.artifacts.sort();
        self.repro_hash = self.compute_repro_hash();
        self.timestamp = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
        let path = dir.join(FILE_NAME);
        let text = serde_json::to_string_pretty(&self).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(self)
    }
}
