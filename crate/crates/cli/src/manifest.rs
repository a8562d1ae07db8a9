use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use perfowave::Result;

#[derive(Debug, Clone, Serialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputFile {
    /// Relative to the run directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub status: String,
    pub config_sha256: Option<String>,
    pub seed: Option<u64>,
    pub version: String,
    pub started_at: String,
    pub finished_at: String,
    pub threads: usize,
    pub stages: Vec<StageTime>,
    pub outputs: Vec<OutputFile>,
    pub warnings: Vec<String>,
    pub error: Option<serde_json::Value>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Collects provenance while a command runs.
pub struct RunLog {
    pub dir: PathBuf,
    manifest: RunManifest,
    files: Vec<PathBuf>,
}

impl RunLog {
    pub fn new(command: &str, dir: PathBuf, threads: usize) -> Self {
        RunLog {
            dir,
            manifest: RunManifest {
                command: command.to_string(),
                status: "running".into(),
                config_sha256: None,
                seed: None,
                version: env!("CARGO_PKG_VERSION").to_string(),
                started_at: chrono::Utc::now().to_rfc3339(),
                finished_at: String::new(),
                threads,
                stages: Vec::new(),
                outputs: Vec::new(),
                warnings: Vec::new(),
                error: None,
            },
            files: Vec::new(),
        }
    }

    pub fn set_config(&mut self, effective_toml: &str, seed: u64) {
        self.manifest.config_sha256 = Some(sha256_hex(effective_toml.as_bytes()));
        self.manifest.seed = Some(seed);
    }

    pub fn warn(&mut self, message: String) {
        eprintln!("warning: {message}");
        self.manifest.warnings.push(message);
    }

    /// Runs `f` and records its wall time under `stage`.
    pub fn stage<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f();
        self.manifest.stages.push(StageTime {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Registers a written file for the checksum inventory.
    pub fn output(&mut self, path: PathBuf) {
        self.files.push(path);
    }

    /// Writes `manifest.json`; checksums are taken now, after every output is closed.
    pub fn finish(mut self, error: Option<serde_json::Value>) -> std::io::Result<PathBuf> {
        self.manifest.status = if error.is_some() { "error" } else { "ok" }.into();
        self.manifest.error = error;
        self.manifest.finished_at = chrono::Utc::now().to_rfc3339();
        for f in &self.files {
            let Ok(bytes) = std::fs::read(f) else {
                continue;
            };
            self.manifest.outputs.push(OutputFile {
                path: relative(&self.dir, f),
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            });
        }
        std::fs::create_dir_all(&self.dir)?;
        let path = self.dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(path)
    }
}

fn relative(base: &Path, p: &Path) -> String {
    p.strip_prefix(base)
        .unwrap_or(p)
        .to_string_lossy()
        .into_owned()
}
