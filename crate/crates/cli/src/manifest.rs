//! Run manifests: the resolved config, derived seeds and content hashes of
//! every input and output, enough to reproduce a run exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    let digest = Sha256::digest(&bytes);
    let mut out = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(out, "{b:02x}");
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    /// File name to sha256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, config: &BTreeMap<String, String>) -> Self {
        Self {
            command: command.to_string(),
            config: config.clone(),
            ..Self::default()
        }
    }

    pub fn input(&mut self, label: &str, path: &Path) -> Result<()> {
        self.inputs.insert(label.to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Hashes the named files inside `dir` and writes `dir/manifest.json`.
    pub fn finish(mut self, dir: &Path, outputs: &[&str]) -> Result<()> {
        for name in outputs {
            self.outputs.insert(name.to_string(), sha256_file(&dir.join(name))?);
        }
        let text = serde_json::to_string_pretty(&self)? + "\n";
        std::fs::write(dir.join("manifest.json"), text)?;
        Ok(())
    }
}
