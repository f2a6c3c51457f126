//! The per-run manifest, written before any compute starts.

use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use chrono::Utc;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::UsageError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment_id: String,
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub config_sha256: String,
    pub code_version: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Hash of command, arguments and config; equal fingerprints mark a re-run.
    pub fingerprint: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: String,
}

pub fn code_version() -> String {
    let fp = kgs4::preprocess::pipeline_fingerprint();
    format!("kgs4 {} (pipeline {})", env!("CARGO_PKG_VERSION"), &fp[..12])
}

impl RunManifest {
    pub fn new(
        experiment_id: &str,
        command: &str,
        args: Vec<String>,
        config_path: Option<PathBuf>,
        config_sha256: String,
        seed: u64,
        output_dir: PathBuf,
    ) -> Self {
        let mut h = Sha256::new();
        for part in [command, &config_sha256].into_iter().chain(args.iter().map(String::as_str)) {
            h.update(part.as_bytes());
            h.update([0]);
        }
        h.update(seed.to_le_bytes());
        RunManifest {
            experiment_id: experiment_id.into(),
            command: command.into(),
            args,
            config_path,
            config_sha256,
            code_version: code_version(),
            seed,
            output_dir,
            fingerprint: hex::encode(h.finalize()),
            started_at: Utc::now().to_rfc3339(),
            finished_at: None,
            status: "running".into(),
        }
    }

    /// Claims `self.output_dir` for this run. A directory holding a manifest
    /// from a different run is refused; an identical re-run takes it over.
    pub fn claim(&self) -> Result<()> {
        let path = self.output_dir.join(MANIFEST_FILE);
        if path.exists() {
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let previous: RunManifest =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            if previous.fingerprint != self.fingerprint {
                return Err(UsageError(format!(
                    "experiment id `{}` is already used in {} by a different run",
                    self.experiment_id,
                    self.output_dir.display()
                ))
                .into());
            }
        }
        self.write()
    }

    pub fn finish(&mut self, status: &str) -> Result<()> {
        self.finished_at = Some(Utc::now().to_rfc3339());
        self.status = status.into();
        self.write()
    }

    fn write(&self) -> Result<()> {
        fs::create_dir_all(&self.output_dir)
            .with_context(|| format!("creating {}", self.output_dir.display()))?;
        let path = self.output_dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
