//! Run manifests: enough to re-run a command and check its outputs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use chr_core::SimConfig;

use crate::{Context, Outcome};

/// Flags that do not change output bytes, or whose content is embedded.
const LOCAL_FLAGS: [&str; 3] = ["--out", "--workers", "--scenario"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub version: String,
    /// Arguments after the program name, minus output, worker and scenario flags.
    pub command: Vec<String>,
    /// Decimal string: TOML integers stop at 2^63 - 1.
    pub seed: Option<String>,
    pub scenario_path: Option<String>,
    /// Scenario file contents as read at run time.
    pub scenario: Option<String>,
    /// Simulation settings as `key = value` lines; the worker count is left out.
    pub sim: Option<String>,
    pub outputs: Vec<OutputRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputRecord {
    pub path: String,
    pub sha256: String,
}

impl RunManifest {
    pub fn new(args: &[String], ctx: &Context, outcome: &Outcome) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: replayable_args(args),
            seed: ctx.seed.map(|s| s.to_string()),
            scenario_path: ctx.scenario_path.clone(),
            scenario: ctx.scenario_text.clone(),
            sim: outcome.sim.as_ref().map(SimConfig::describe),
            outputs: outcome
                .files
                .iter()
                .map(|f| OutputRecord {
                    path: f.path.clone(),
                    sha256: sha256_hex(&f.bytes),
                })
                .collect(),
        }
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn replayable_args(args: &[String]) -> Vec<String> {
    let mut kept = Vec::new();
    let mut iter = args.iter();
    while let Some(arg) = iter.next() {
        if LOCAL_FLAGS.contains(&arg.as_str()) {
            iter.next();
        } else if !LOCAL_FLAGS.iter().any(|f| arg.starts_with(&format!("{f}="))) {
            kept.push(arg.clone());
        }
    }
    kept
}

/// Differences between the outputs of two manifests, one line each.
pub fn compare(recorded: &RunManifest, fresh: &RunManifest) -> Vec<String> {
    let mut lines = Vec::new();
    for r in &recorded.outputs {
        match fresh.outputs.iter().find(|f| f.path == r.path) {
            None => lines.push(format!("{} missing from replay", r.path)),
            Some(f) if f.sha256 != r.sha256 => lines.push(format!("{} sha256 {} != {}", r.path, f.sha256, r.sha256)),
            Some(_) => {}
        }
    }
    for f in &fresh.outputs {
        if !recorded.outputs.iter().any(|r| r.path == f.path) {
            lines.push(format!("{} not in the recorded manifest", f.path));
        }
    }
    lines
}
