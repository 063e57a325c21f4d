//! Run configuration: one TOML file with a section per stage.
//!
//! Relative paths are resolved against the directory holding the config
//! file. Every key has a default, so an empty file is a valid config as long
//! as the input paths exist where the defaults point.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::EvalConfig;
use crate::ingest::InputFormat;
use crate::llm::{BiasTable, HttpConfig, RetryPolicy, SamplingSettings};
use crate::nbr::NbrConfig;
use crate::reconstruct::ReconstructConfig;
use crate::sessionize::SessionizerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InputConfig {
    pub impressions: PathBuf,
    /// Inferred from the file extension when absent.
    pub format: Option<InputFormat>,
    pub profiles: PathBuf,
    /// Keep only impressions from this source.
    pub source: Option<String>,
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig {
            impressions: "impressions.jsonl".into(),
            format: None,
            profiles: "profiles.csv".into(),
            source: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeaturesConfig {
    /// Taxonomy file, one category per line; bundled list when absent.
    pub taxonomy: Option<PathBuf>,
    /// Directory of `<template id>.txt` overrides.
    pub templates: Option<PathBuf>,
    pub settings: SamplingSettings,
}

impl Default for FeaturesConfig {
    fn default() -> Self {
        FeaturesConfig {
            taxonomy: None,
            templates: None,
            settings: SamplingSettings::EXTRACTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditConfig {
    pub categories: Vec<String>,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            categories: crate::audit::DEFAULT_TARGETS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateSection {
    #[serde(flatten)]
    pub eval: EvalConfig,
    /// `attribute,category,probability` file; the bundled census prior is
    /// used when absent.
    pub prior: Option<PathBuf>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            eval: EvalConfig::default(),
            prior: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub bias: BiasTable,
    /// Give the mock the cohort's ground truth so bias rules can use it.
    pub inject_truth: bool,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            bias: BiasTable::uniform(),
            inject_truth: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Response cache root; no caching when absent.
    pub cache_dir: Option<PathBuf>,
    pub requests_per_minute: f64,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    pub http: HttpConfig,
    pub mock: MockConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            cache_dir: None,
            requests_per_minute: 60.0,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
            http: HttpConfig::default(),
            mock: MockConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    /// Experiment seed: mock backend, shuffles and sampling baselines.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub input: InputConfig,
    pub sessionize: SessionizerConfig,
    pub features: FeaturesConfig,
    pub audit: AuditConfig,
    pub nbr: NbrConfig,
    pub reconstruct: ReconstructConfig,
    pub evaluate: EvaluateSection,
    pub backend: BackendConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 42,
            output_dir: "out".into(),
            input: InputConfig::default(),
            sessionize: SessionizerConfig::default(),
            features: FeaturesConfig::default(),
            audit: AuditConfig::default(),
            nbr: NbrConfig::default(),
            reconstruct: ReconstructConfig::default(),
            evaluate: EvaluateSection::default(),
            backend: BackendConfig::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.output_dir);
        resolve(base, &mut self.input.impressions);
        resolve(base, &mut self.input.profiles);
        for p in [
            &mut self.features.taxonomy,
            &mut self.features.templates,
            &mut self.evaluate.prior,
            &mut self.backend.cache_dir,
        ]
        .into_iter()
        .flatten()
        {
            resolve(base, p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sessionize.validate()?;
        self.nbr.main_spec().validate()?;
        self.evaluate.eval.rules.validate()?;
        if self.backend.max_in_flight == 0 {
            return Err(Error::Config("backend.max_in_flight must be >= 1".into()));
        }
        if !(self.backend.requests_per_minute >= 0.0) {
            return Err(Error::Config("backend.requests_per_minute must be >= 0".into()));
        }
        if self.audit.categories.is_empty() {
            return Err(Error::Config("audit.categories is empty".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
