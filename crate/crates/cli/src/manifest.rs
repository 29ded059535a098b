use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

/// Record of one CLI invocation, written next to its main output before the
/// work starts and rewritten when it finishes.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub artifacts: Vec<String>,
    pub started_unix_s: f64,
    pub finished_unix_s: Option<f64>,
    pub config: RunConfig,
    #[serde(skip)]
    path: PathBuf,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.toml");
    out.with_file_name(name)
}

impl RunManifest {
    pub fn begin(command: &str, seed: u64, config: &RunConfig, out: &Path, artifacts: &[&Path]) -> Result<Self, CliError> {
        let m = Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            artifacts: artifacts.iter().map(|p| p.display().to_string()).collect(),
            started_unix_s: now(),
            finished_unix_s: None,
            config: config.clone(),
            path: manifest_path(out),
        };
        m.write()?;
        Ok(m)
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.finished_unix_s = Some(now());
        self.write()
    }

    fn write(&self) -> Result<(), CliError> {
        let text = toml::to_string(self).map_err(|e| CliError::Usage(format!("manifest: {e}")))?;
        fs::write(&self.path, text).map_err(|e| CliError::Io(self.path.clone(), e))
    }
}
