use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use bimoe::config::RunConfig;

use crate::Exit;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

/// Record written beside every command's outputs; `bimoe replay` re-runs it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    /// Command line after the program name, exactly as given.
    pub args: Vec<String>,
    pub config: Option<BTreeMap<String, String>>,
    pub seed: Option<u64>,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<PathBuf>,
    /// SHA-256 over the input digests in order.
    pub input_hash: String,
    pub expert_count: Option<usize>,
    pub experts: Option<Vec<String>>,
}

impl RunManifest {
    pub fn new(command: &str, args: &[String], inputs: &[&Path]) -> Result<Self> {
        let mut files = Vec::with_capacity(inputs.len());
        for &p in inputs {
            files.push(InputFile {
                path: p.to_path_buf(),
                sha256: file_digest(p)?,
            });
        }
        let mut h = Sha256::new();
        for f in &files {
            h.update(f.sha256.as_bytes());
        }
        Ok(Self {
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            args: args.to_vec(),
            config: None,
            seed: None,
            inputs: files,
            outputs: Vec::new(),
            input_hash: hex(&h.finalize()),
            expert_count: None,
            experts: None,
        })
    }

    pub fn with_config(mut self, cfg: &RunConfig) -> Self {
        let map = RunConfig::keys()
            .map(|k| (k.to_string(), cfg.get(k).expect("listed key")))
            .collect();
        self.config = Some(map);
        self.seed = Some(cfg.train.seed);
        self
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .context(Exit::Usage)?;
        serde_json::from_str(&text)
            .with_context(|| format!("{} is not a run manifest", path.display()))
            .context(Exit::Usage)
    }

    /// Fails if any recorded input changed since the run.
    pub fn verify_inputs(&self) -> Result<()> {
        for f in &self.inputs {
            let now = file_digest(&f.path)?;
            if now != f.sha256 {
                return Err(anyhow::anyhow!("{} changed since the recorded run", f.path.display())).context(Exit::Data);
            }
        }
        Ok(())
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path)
        .with_context(|| format!("reading {}", path.display()))
        .context(Exit::Data)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Manifest location for a single-file output.
pub fn beside(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}
