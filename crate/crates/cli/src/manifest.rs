use crossseg_core::RunConfig;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

/// Record of one command invocation, written atomically when it finishes.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub git_describe: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub metrics: BTreeMap<String, f64>,
    pub artifacts: BTreeMap<String, String>,
    pub config: Option<RunConfig>,
}

pub fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

impl RunManifest {
    pub fn start(command: &str, seed: u64, config: Option<RunConfig>) -> Self {
        Self {
            command: command.into(),
            args: std::env::args().collect(),
            seed,
            git_describe: git_describe(),
            started_unix: now(),
            finished_unix: 0,
            metrics: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            config,
        }
    }

    pub fn metric(&mut self, key: &str, value: f64) {
        self.metrics.insert(key.into(), value);
    }

    pub fn artifact(&mut self, key: &str, path: &Path) {
        self.artifacts.insert(key.into(), path.display().to_string());
    }

    /// Stamp the end time and write `run_manifest.toml` under `dir` via a
    /// temporary file and rename.
    pub fn finish(mut self, dir: &Path) -> anyhow::Result<()> {
        self.finished_unix = now();
        std::fs::create_dir_all(dir)?;
        let text = toml::to_string(&self)?;
        let tmp = dir.join(".run_manifest.toml.tmp");
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, dir.join("run_manifest.toml"))?;
        Ok(())
    }
}
