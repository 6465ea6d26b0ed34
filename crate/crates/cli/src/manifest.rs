//! Run manifests: a copy of the effective config, content hashes of every
//! input file, and the run status. Written when the run starts and rewritten
//! on completion, so a manifest exists even when the run fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};

use crate::CliError;

pub struct Manifest {
    path: PathBuf,
    body: Value,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x1000_0000_01b3);
    }
    hash
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl Manifest {
    /// Creates `manifest-<command>.json` under `output_dir` with status
    /// "running" and hashes of the given input files.
    pub fn start(
        output_dir: &Path,
        command: &str,
        config_echo: Value,
        inputs: &[PathBuf],
    ) -> Result<Self, CliError> {
        fs::create_dir_all(output_dir)
            .map_err(|e| CliError::Data(format!("cannot create {}: {e}", output_dir.display())))?;
        let mut hashes = serde_json::Map::new();
        for input in inputs {
            let digest = match fs::read(input) {
                Ok(bytes) => format!("fnv1a:{:016x}", fnv1a(&bytes)),
                Err(_) => "missing".to_string(),
            };
            hashes.insert(input.display().to_string(), Value::String(digest));
        }
        let body = json!({
            "command": command,
            "status": "running",
            "started_unix": now_unix(),
            "finished_unix": Value::Null,
            "crate_version": env!("CARGO_PKG_VERSION"),
            "config": config_echo,
            "input_hashes": Value::Object(hashes),
        });
        let manifest = Self {
            path: output_dir.join(format!("manifest-{command}.json")),
            body,
        };
        manifest.write()?;
        Ok(manifest)
    }

    fn write(&self) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(&self.body)
            .map_err(|e| CliError::Other(format!("manifest encode: {e}")))?;
        fs::write(&self.path, text)
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", self.path.display())))?;
        Ok(())
    }

    pub fn finish(mut self, status: &str) {
        self.body["status"] = Value::String(status.to_string());
        self.body["finished_unix"] = json!(now_unix());
        // Failing to rewrite the manifest must not mask the run's own outcome.
        let _ = self.write();
    }
}
