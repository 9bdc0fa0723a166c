use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use weaksup_pose::io::write_json;
use weaksup_pose::pipeline::Ablation;

pub const MANIFEST: &str = "manifest.json";

/// Record of one command run. Artifact paths are relative to the manifest's
/// directory. Timings are the only non-deterministic content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<Ablation>,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: Vec<String>,
    pub counts: BTreeMap<String, usize>,
    pub timings_s: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: &impl Serialize) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            ablation: None,
            config: serde_json::to_value(config).expect("configs serialize"),
            inputs: BTreeMap::new(),
            artifacts: Vec::new(),
            counts: BTreeMap::new(),
            timings_s: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs
            .insert(name.to_string(), path.display().to_string());
    }

    pub fn count(&mut self, name: &str, n: usize) {
        self.counts.insert(name.to_string(), n);
    }

    pub fn artifact(&mut self, name: impl Into<String>) {
        self.artifacts.push(name.into());
    }

    pub fn time(&mut self, stage: &str, since: Instant) {
        self.timings_s
            .insert(stage.to_string(), since.elapsed().as_secs_f64());
    }

    pub fn write(&self, dir: &Path) -> weaksup_pose::Result<()> {
        write_json(&dir.join(MANIFEST), self)
    }
}
