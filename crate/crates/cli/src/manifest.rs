use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use gridcascade::rng::fingerprint;
use serde::Serialize;

pub const MANIFEST_NAME: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub path: String,
    pub fingerprint: String,
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
    pub seeds: BTreeMap<String, u64>,
    pub config_hashes: BTreeMap<String, String>,
    pub inputs: Vec<String>,
    pub outputs: Vec<Artifact>,
    pub started_unix: u64,
    pub elapsed_secs: f64,
    #[serde(skip)]
    clock: Option<Instant>,
}

/// Fingerprint of any serializable configuration.
pub fn hash_of<T: Serialize>(value: &T) -> String {
    fingerprint(serde_json::to_string(value).expect("config serializes").as_bytes())
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            args: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seeds: BTreeMap::new(),
            config_hashes: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            elapsed_secs: 0.0,
            clock: Some(Instant::now()),
        }
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.to_string(), seed);
    }

    pub fn config<T: Serialize>(&mut self, name: &str, value: &T) {
        self.config_hashes.insert(name.to_string(), hash_of(value));
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading back {}", path.display()))?;
        self.outputs.push(Artifact { path: path.display().to_string(), fingerprint: fingerprint(&bytes) });
        Ok(())
    }

    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        self.elapsed_secs = self.clock.take().map(|c| c.elapsed().as_secs_f64()).unwrap_or(0.0);
        let path = dir.join(MANIFEST_NAME);
        std::fs::write(&path, serde_json::to_string_pretty(&self)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
