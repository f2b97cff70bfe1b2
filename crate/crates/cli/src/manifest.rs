use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const FILE: &str = "manifest.json";

/// One command's record: what it was run with and what it produced.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Entry {
    pub config: Value,
    pub seed: u64,
    /// Paths relative to the run directory.
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_clock_secs: f64,
}

/// Audit trail of a run directory, keyed by step (`synth`, `quantize`,
/// `m0`..`m4`, `retrieve`, `report`).
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub entries: BTreeMap<String, Entry>,
}

impl RunManifest {
    pub fn load_or_default(dir: &Path) -> Result<Self> {
        let path = dir.join(FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text).with_context(|| format!("reading {}", path.display()))
    }

    /// Adds `entry` under `key` and rewrites the manifest. Every file any
    /// entry references must exist.
    pub fn record(dir: &Path, key: &str, entry: Entry) -> Result<()> {
        let mut m = Self::load_or_default(dir)?;
        m.entries.insert(key.to_string(), entry);
        for (k, e) in &m.entries {
            for f in e.inputs.iter().chain(&e.outputs) {
                if !dir.join(f).exists() {
                    bail!("manifest entry {k} references missing file {f}");
                }
            }
        }
        let tmp = dir.join(format!(".{FILE}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(&m)? + "\n")?;
        fs::rename(&tmp, dir.join(FILE))?;
        Ok(())
    }
}
