use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Resolved;
use crate::Common;

/// Collects the artifacts of one command and writes the manifest.
pub struct Run {
    out: PathBuf,
    command: &'static str,
    artifacts: Vec<String>,
    started: Instant,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    artifacts: &'a [String],
    config_hash: String,
    library_version: &'a str,
    duration_secs: f64,
}

impl Run {
    pub fn start(common: &Common, command: &'static str) -> Result<Self> {
        fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
        Ok(Run { out: common.out.clone(), command, artifacts: Vec::new(), started: Instant::now() })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.out.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    /// Writes `resolved_config.json` and `manifest.json`.
    pub fn finish<T: Serialize>(mut self, common: &Common, settings: &T) -> Result<()> {
        let resolved = Resolved {
            command: self.command,
            out: common.out.display().to_string(),
            workers: common.workers,
            settings,
        };
        let text = serde_json::to_string_pretty(&resolved)? + "\n";
        self.write("resolved_config.json", &text)?;
        let manifest = Manifest {
            command: self.command,
            artifacts: &self.artifacts,
            config_hash: hex::encode(Sha256::digest(text.as_bytes())),
            library_version: env!("CARGO_PKG_VERSION"),
            duration_secs: self.started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        let path = self.out.join("manifest.json");
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

/// Runs `f` on `workers` threads when requested.
pub fn with_workers<R: Send>(common: &Common, f: impl FnOnce() -> R + Send) -> R {
    mpt_core::par::with_workers(common.workers.unwrap_or(0), f)
}
