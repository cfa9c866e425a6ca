use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use qurag_core::digest::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const RUN_MANIFEST: &str = "manifest.json";

pub const BLEU_VARIANT: &str =
    "corpus-level, n-grams 1-4, uniform weights, exponential brevity penalty, no smoothing, lowercase punctuation-splitting tokenizer";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// File (relative to the run directory) → SHA-256, for files the stage read.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    /// Same for files the stage wrote.
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub bundle_hash: String,
    pub tool_version: String,
    pub bleu: String,
    pub config: RunConfig,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn file_digest(dir: &Path, name: &str) -> Result<String> {
    let bytes = fs::read(dir.join(name)).with_context(|| format!("reading {}", dir.join(name).display()))?;
    Ok(sha256_hex(&bytes))
}

impl RunManifest {
    pub fn new(run_dir: &Path, bundle_hash: &str, config: RunConfig) -> Self {
        Self {
            run_id: run_id(run_dir),
            bundle_hash: bundle_hash.to_owned(),
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            bleu: BLEU_VARIANT.to_owned(),
            config,
            stages: BTreeMap::new(),
        }
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(RUN_MANIFEST);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(run_dir.join(RUN_MANIFEST), json + "\n")
            .with_context(|| format!("writing manifest in {}", run_dir.display()))
    }

    /// Replaces the entry for `stage` with fresh checksums of the named files.
    pub fn record_stage(&mut self, run_dir: &Path, stage: &str, inputs: &[String], outputs: &[String]) -> Result<()> {
        let digests = |names: &[String]| -> Result<BTreeMap<String, String>> {
            names
                .iter()
                .map(|n| Ok((n.clone(), file_digest(run_dir, n)?)))
                .collect()
        };
        let finished_at =
            (!self.config.deterministic).then(|| chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true));
        self.stages.insert(
            stage.to_owned(),
            StageRecord {
                inputs: digests(inputs)?,
                outputs: digests(outputs)?,
                finished_at,
            },
        );
        Ok(())
    }

    /// Inputs of `stage` whose contents changed since it ran.
    pub fn stale_inputs(&self, run_dir: &Path, stage: &str) -> Vec<String> {
        let Some(rec) = self.stages.get(stage) else {
            return Vec::new();
        };
        rec.inputs
            .iter()
            .filter(|(name, digest)| file_digest(run_dir, name).ok().as_ref() != Some(*digest))
            .map(|(name, _)| name.clone())
            .collect()
    }
}

pub fn run_id(run_dir: &Path) -> String {
    run_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".to_owned())
}
