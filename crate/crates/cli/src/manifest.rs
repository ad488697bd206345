//! Stage output directories and their manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the stage directory.
    pub path: PathBuf,
    pub sha256: String,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub config_hash: String,
    pub code_version: String,
    pub wall_clock_secs: f64,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<Artifact>,
    /// The effective configuration, enough to re-run the stage.
    pub config: RunConfig,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Ok(serde_json::from_str(&text).map_err(tta_core::Error::from)?)
    }

    /// Every listed artifact exists under `dir` with the recorded digest.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for a in &self.artifacts {
            let p = dir.join(&a.path);
            let bytes = fs::read(&p).map_err(|e| CliError::io(&p, e))?;
            if sha256_hex(&bytes) != a.sha256 || a.config_hash != self.config_hash {
                return Err(tta_core::Error::Contract(format!("{} does not match the manifest", p.display())).into());
            }
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}

/// An output directory being filled by one command.
pub struct Stage<'a> {
    cfg: &'a RunConfig,
    name: &'static str,
    dir: PathBuf,
    started: Instant,
    hash: String,
    artifacts: Vec<Artifact>,
    seeds: BTreeMap<String, u64>,
}

impl<'a> Stage<'a> {
    pub fn begin(cfg: &'a RunConfig, name: &'static str) -> Result<Self> {
        let dir = cfg.out_dir().join(name);
        create_dir(&dir)?;
        Ok(Self {
            cfg,
            name,
            dir,
            started: Instant::now(),
            hash: cfg.hash(),
            artifacts: Vec::new(),
            seeds: BTreeMap::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn seed(&mut self, name: &str, value: u64) -> u64 {
        self.seeds.insert(name.to_string(), value);
        value
    }

    /// Writes `bytes` to `rel` under the stage directory and records it.
    pub fn write(&mut self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<PathBuf> {
        let rel = rel.as_ref();
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            create_dir(parent)?;
        }
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.artifacts.push(Artifact {
            path: rel.to_path_buf(),
            sha256: sha256_hex(bytes),
            config_hash: self.hash.clone(),
        });
        Ok(path)
    }

    pub fn finish(self) -> Result<RunManifest> {
        let manifest = RunManifest {
            stage: self.name.to_string(),
            config_hash: self.hash,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            seeds: self.seeds,
            artifacts: self.artifacts,
            config: self.cfg.clone(),
        };
        let path = self.dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).map_err(tta_core::Error::from)?;
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(manifest)
    }
}
