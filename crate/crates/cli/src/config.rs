//! Run configuration file.
//!
//! ```toml
//! bundle = "bundle"
//! conditions = ["base", "c", "g", "m", "cg", "cm", "gm", "cgm"]
//! modes = ["auto"]
//! overrides = "overrides.txt"
//! cache = "cache/responses.jsonl"
//! rate_limit = 2.0
//! deterministic = true
//!
//! [retrieval]
//! k = 3
//! normalization = true
//!
//! [analyzer]
//! program = "/usr/local/bin/quechua-analyzer"
//! args = ["--tsv"]
//! timeout_secs = 10
//!
//! [[models]]
//! model_id = "gpt-4o"
//! endpoint = "https://api.openai.com/v1/chat/completions"
//! auth_env = "OPENAI_API_KEY"
//! concurrency = 4
//! params = { temperature = 0.0 }
//! ```
//!
//! Relative paths resolve against the directory holding the file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use qurag_core::promptgen::enumerate_conditions;
use qurag_core::retrieval::RetrievalConfig;
use qurag_core::{PromptCondition, RetrievalMode};
use qurag_llm::ModelSpec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzerConfig {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    10
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub bundle: Option<PathBuf>,
    #[serde(default)]
    pub models: Vec<ModelSpec>,
    /// Condition codes or labels; all eight when empty.
    #[serde(default)]
    pub conditions: Vec<String>,
    /// `auto` and/or `manual`; `auto` when empty.
    #[serde(default)]
    pub modes: Vec<String>,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    pub overrides: Option<PathBuf>,
    pub analyzer: Option<AnalyzerConfig>,
    pub cache: Option<PathBuf>,
    /// Requests per second across all models; 0 means unlimited.
    #[serde(default)]
    pub rate_limit: f64,
    /// Keep wall-clock times out of run manifests.
    #[serde(default = "default_true")]
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            bundle: None,
            models: Vec::new(),
            conditions: Vec::new(),
            modes: Vec::new(),
            retrieval: RetrievalConfig::default(),
            overrides: None,
            analyzer: None,
            cache: None,
            rate_limit: 0.0,
            deterministic: true,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.bundle, &mut cfg.overrides, &mut cfg.cache]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn parsed_conditions(&self) -> Result<Vec<PromptCondition>> {
        if self.conditions.is_empty() {
            return Ok(enumerate_conditions().to_vec());
        }
        let mut out: Vec<PromptCondition> = Vec::new();
        for c in &self.conditions {
            let cond: PromptCondition = c.parse().map_err(|e| anyhow::anyhow!("{e}"))?;
            if !out.contains(&cond) {
                out.push(cond);
            }
        }
        out.sort_by_key(|c| c.ordinal());
        Ok(out)
    }

    pub fn parsed_modes(&self) -> Result<Vec<RetrievalMode>> {
        if self.modes.is_empty() {
            return Ok(vec![RetrievalMode::Auto]);
        }
        let mut out = Vec::new();
        for m in &self.modes {
            let mode: RetrievalMode = m.parse().map_err(|e: String| anyhow::anyhow!(e))?;
            if !out.contains(&mode) {
                out.push(mode);
            }
        }
        out.sort();
        Ok(out)
    }

    /// Checks everything that can be checked before a stage runs.
    pub fn validate(&self) -> Result<()> {
        self.parsed_conditions()?;
        let modes = self.parsed_modes()?;
        for (what, p) in [("bundle", &self.bundle), ("overrides", &self.overrides)] {
            if let Some(p) = p {
                if !p.exists() {
                    bail!("{what} path {} does not exist", p.display());
                }
            }
        }
        if modes.contains(&RetrievalMode::Manual) && self.overrides.is_none() {
            bail!("manual mode needs an overrides file");
        }
        if self.retrieval.k == 0 {
            bail!("retrieval.k must be at least 1");
        }
        if self.rate_limit.is_nan() || self.rate_limit < 0.0 {
            bail!("rate_limit must be non-negative");
        }
        for m in &self.models {
            m.validate()?;
        }
        Ok(())
    }
}
