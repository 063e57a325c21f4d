//! Stage orchestration over plain JSONL/CSV artifacts in one output
//! directory, plus the run manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::audit::{self, ExposureCell};
use crate::config::{BackendKind, Config};
use crate::demographics::DemographicProfile;
use crate::error::{Error, Result};
use crate::evaluate::{self, CensusPrior};
use crate::features::{self, AdFeatures, IabTaxonomy};
use crate::ingest::{self, AdImpression, CohortDataset, InputFormat};
use crate::llm::{Backend, HttpBackend, LlmClient, MockBackend, ResponseCache};
use crate::nbr;
use crate::reconstruct::{self, SessionPrediction, UserPrediction};
use crate::sessionize::{self, Session};
use crate::template::TemplateSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Sessionize,
    Features,
    Audit,
    Nbr,
    Reconstruct,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Sessionize,
        Stage::Features,
        Stage::Audit,
        Stage::Nbr,
        Stage::Reconstruct,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Sessionize => "sessionize",
            Stage::Features => "features",
            Stage::Audit => "audit",
            Stage::Nbr => "nbr",
            Stage::Reconstruct => "reconstruct",
            Stage::Evaluate => "evaluate",
        }
    }
}

/// File names inside the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub dir: PathBuf,
}

impl Layout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Layout { dir: dir.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn manifest(&self) -> PathBuf {
        self.path("run_manifest.json")
    }

    /// Artifacts a stage reads from the output directory, with the stage
    /// that writes each one.
    pub fn inputs(&self, stage: Stage) -> Vec<(PathBuf, Stage)> {
        let p = |n: &str, s| (self.path(n), s);
        match stage {
            Stage::Sessionize => vec![],
            Stage::Features => vec![p(SESSIONS, Stage::Sessionize)],
            Stage::Audit => vec![p(SESSIONS, Stage::Sessionize), p(FEATURES, Stage::Features)],
            Stage::Nbr => vec![p(CELLS, Stage::Audit)],
            Stage::Reconstruct => vec![p(SESSIONS, Stage::Sessionize), p(FEATURES, Stage::Features)],
            Stage::Evaluate => vec![
                p(SESSION_PREDICTIONS, Stage::Reconstruct),
                p(USER_PREDICTIONS, Stage::Reconstruct),
            ],
        }
    }

    /// Fixed-name outputs (per-category regression tables come in addition).
    pub fn outputs(&self, stage: Stage) -> Vec<PathBuf> {
        let names: &[&str] = match stage {
            Stage::Sessionize => &[SESSIONS, SESSIONIZE_REPORT],
            Stage::Features => &[FEATURES, FEATURES_REJECTED],
            Stage::Audit => &[CELLS, AUDIT_REPORT],
            Stage::Nbr => &[NBR_FITS],
            Stage::Reconstruct => &[SESSION_PREDICTIONS, USER_PREDICTIONS, RECONSTRUCT_FAILURES],
            Stage::Evaluate => &[CENSUS_PRIOR, EVAL_REPORT, EVAL_LENIENT, EVAL_METADATA],
        };
        names.iter().map(|n| self.path(n)).collect()
    }
}

pub const SESSIONS: &str = "sessions.jsonl";
pub const SESSIONIZE_REPORT: &str = "sessionize_report.csv";
pub const FEATURES: &str = "features.jsonl";
pub const FEATURES_REJECTED: &str = "features_rejected.csv";
pub const CELLS: &str = "cells.jsonl";
pub const AUDIT_REPORT: &str = "audit_report.csv";
pub const NBR_FITS: &str = "nbr_fits.json";
pub const SESSION_PREDICTIONS: &str = "session_predictions.jsonl";
pub const USER_PREDICTIONS: &str = "user_predictions.jsonl";
pub const RECONSTRUCT_FAILURES: &str = "reconstruct_failures.csv";
pub const CENSUS_PRIOR: &str = "census_prior.csv";
pub const EVAL_REPORT: &str = "eval_report.csv";
pub const EVAL_LENIENT: &str = "eval_lenient.csv";
pub const EVAL_METADATA: &str = "eval_metadata.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub counts: BTreeMap<String, Value>,
    /// File name to SHA-256 of its contents.
    pub artifacts: BTreeMap<String, String>,
}

/// Everything needed to re-run: the resolved config, seed, versions and
/// per-stage counts. Contains no wall-clock time, so a re-run with the mock
/// backend reproduces it byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub taxonomy_version: String,
    pub backend: String,
    pub config: Config,
    pub stages: BTreeMap<Stage, StageRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct Pipeline {
    config: Config,
    layout: Layout,
    jobs: usize,
}

struct Outputs<'a> {
    layout: &'a Layout,
    record: StageRecord,
}

impl Outputs<'_> {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.layout.path(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.record.artifacts.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn count(&mut self, key: &str, value: impl Serialize) {
        self.record
            .counts
            .insert(key.to_string(), serde_json::to_value(value).expect("serializable count"));
    }
}

fn jsonl<T: Serialize>(records: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    reconstruct::write_jsonl(&mut buf, records)?;
    Ok(buf)
}

impl Pipeline {
    pub fn new(config: Config, jobs: usize) -> Self {
        let layout = Layout::new(&config.output_dir);
        Pipeline {
            config,
            layout,
            jobs: jobs.max(1),
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    /// Human-readable plan for `stages`; touches nothing.
    pub fn plan(&self, stages: &[Stage]) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "output directory: {}", self.layout.dir.display());
        let _ = writeln!(out, "seed: {}  jobs: {}  backend: {:?}", self.config.seed, self.jobs, self.config.backend.kind);
        for (i, &s) in stages.iter().enumerate() {
            let _ = writeln!(out, "{}. {}", i + 1, s.name());
            if s == Stage::Sessionize {
                let _ = writeln!(out, "   reads  {}", self.config.input.impressions.display());
            }
            if matches!(s, Stage::Sessionize | Stage::Audit | Stage::Nbr | Stage::Evaluate) {
                let _ = writeln!(out, "   reads  {}", self.config.input.profiles.display());
            }
            for (p, producer) in self.layout.inputs(s) {
                let status = if p.exists() || stages[..i].contains(&producer) {
                    String::new()
                } else {
                    format!("  (missing; run `ad-audit {}` first)", producer.name())
                };
                let _ = writeln!(out, "   reads  {}{status}", p.display());
            }
            for p in self.layout.outputs(s) {
                let _ = writeln!(out, "   writes {}", p.display());
            }
            if s == Stage::Nbr {
                let _ = writeln!(out, "   writes nbr_<category>_main.csv and nbr_<category>_interactions.csv per category");
            }
        }
        out
    }

    /// Runs the stages in order on a pool of `jobs` threads.
    pub fn run(&self, stages: &[Stage]) -> Result<()> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
        pool.install(|| {
            for &s in stages {
                log::info!("stage {}", s.name());
                self.check_inputs(s)?;
                fs::create_dir_all(&self.layout.dir).map_err(|e| Error::io(&self.layout.dir, e))?;
                let mut out = Outputs {
                    layout: &self.layout,
                    record: StageRecord::default(),
                };
                self.run_stage(s, &mut out)?;
                self.update_manifest(s, out.record)?;
            }
            Ok(())
        })
    }

    fn check_inputs(&self, stage: Stage) -> Result<()> {
        for (path, producer) in self.layout.inputs(stage) {
            if !path.exists() {
                return Err(Error::MissingArtifact {
                    path,
                    producer: format!("ad-audit {}", producer.name()),
                });
            }
        }
        Ok(())
    }

    fn run_stage(&self, stage: Stage, out: &mut Outputs<'_>) -> Result<()> {
        match stage {
            Stage::Sessionize => self.sessionize(out),
            Stage::Features => self.features(out),
            Stage::Audit => self.audit(out),
            Stage::Nbr => self.nbr(out),
            Stage::Reconstruct => self.reconstruct(out),
            Stage::Evaluate => self.evaluate(out),
        }
    }

    fn taxonomy(&self) -> Result<IabTaxonomy> {
        match &self.config.features.taxonomy {
            Some(p) => IabTaxonomy::load(p),
            None => Ok(IabTaxonomy::builtin()),
        }
    }

    fn templates(&self) -> Result<TemplateSet> {
        match &self.config.features.templates {
            Some(dir) => TemplateSet::load_dir(dir),
            None => Ok(TemplateSet::builtin()),
        }
    }

    fn profiles(&self) -> Result<BTreeMap<String, DemographicProfile>> {
        ingest::load_profiles(&self.config.input.profiles)
    }

    fn backend(&self) -> Result<Arc<dyn Backend>> {
        let b = &self.config.backend;
        Ok(match b.kind {
            BackendKind::Mock => {
                let truths = if b.mock.inject_truth {
                    self.profiles()?
                } else {
                    BTreeMap::new()
                };
                Arc::new(
                    MockBackend::new(self.config.seed)
                        .with_bias(b.mock.bias.clone(), truths)
                        .with_taxonomy(self.taxonomy()?),
                )
            }
            BackendKind::Http => Arc::new(HttpBackend::from_config(&b.http)?),
        })
    }

    pub fn client(&self) -> Result<LlmClient> {
        let b = &self.config.backend;
        let mut client = LlmClient::new(self.backend()?)
            .with_retry(b.retry)
            .with_max_in_flight(b.max_in_flight);
        if b.kind == BackendKind::Http && b.requests_per_minute > 0.0 {
            client = client.with_rate_limit(b.requests_per_minute);
        }
        if let Some(dir) = &b.cache_dir {
            client = client.with_cache(ResponseCache::new(dir));
        }
        Ok(client)
    }

    fn read_sessions(&self) -> Result<Vec<Session>> {
        reconstruct::read_jsonl(&self.layout.path(SESSIONS))
    }

    fn sessionize(&self, out: &mut Outputs<'_>) -> Result<()> {
        let input = &self.config.input;
        let format = input
            .format
            .unwrap_or_else(|| InputFormat::from_path(&input.impressions));
        let mut impressions = ingest::parse_impressions(&input.impressions, format)?;
        let n_read = impressions.len();
        if let Some(src) = &input.source {
            impressions = ingest::filter_source(impressions, src);
        }
        let n_source = impressions.len();
        let impressions: Vec<AdImpression> = impressions.into_iter().map(AdImpression::cleaned).collect();
        let (cohort, dropped) = CohortDataset::new(impressions, self.profiles()?);
        let outcome = sessionize::sessionize_cohort(&cohort, &self.config.sessionize)?;
        let sessions: Vec<&Session> = outcome.filtered.sessions().collect();
        out.write(SESSIONS, &jsonl(&sessions)?)?;
        let mut buf = Vec::new();
        sessionize::write_report(&mut buf, &outcome.report)?;
        out.write(SESSIONIZE_REPORT, &buf)?;
        out.count("impressions_read", n_read);
        out.count("impressions_after_source_filter", n_source);
        out.count("impressions_without_profile", dropped);
        out.count("users", cohort.user_count());
        out.count("theta_seconds", outcome.theta);
        out.count("theta_source", outcome.theta_source);
        out.count("users_with_kde_threshold", outcome.users_with_threshold);
        out.count("filter", outcome.filtered.counts);
        out.count("data_start", cohort.impressions.iter().map(|i| i.timestamp).min());
        out.count("data_end", cohort.impressions.iter().map(|i| i.timestamp).max());
        Ok(())
    }

    fn features(&self, out: &mut Outputs<'_>) -> Result<()> {
        let sessions = self.read_sessions()?;
        let base = self
            .config
            .input
            .impressions
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        // Relative image refs point next to the impression file.
        let impressions: Vec<AdImpression> = sessions
            .iter()
            .flat_map(|s| s.impressions.iter().cloned())
            .map(|mut imp| {
                imp.image_refs = imp
                    .image_refs
                    .iter()
                    .map(|r| {
                        let p = base.join(r);
                        if Path::new(r).is_relative() && p.exists() {
                            p.to_string_lossy().into_owned()
                        } else {
                            r.clone()
                        }
                    })
                    .collect();
                imp
            })
            .collect();
        let taxonomy = self.taxonomy()?;
        let client = self.client()?;
        let run = features::extract_corpus(
            &impressions,
            &taxonomy,
            &client,
            &self.templates()?,
            self.config.features.settings,
        )?;
        let mut buf = Vec::new();
        features::write_features_jsonl(&mut buf, &run.features)?;
        out.write(FEATURES, &buf)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["ad_id", "reason"])?;
        for (id, reason) in &run.rejected {
            w.write_record([id, reason])?;
        }
        let buf = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        out.write(FEATURES_REJECTED, &buf)?;
        out.count("ads", run.features.len() + run.rejected.len());
        out.count("ads_extracted", run.features.len());
        out.count("ads_rejected", run.rejected.len());
        out.count("taxonomy_version", taxonomy.version());
        log::info!("features: {:?}", client_stats(&client));
        Ok(())
    }

    fn audit(&self, out: &mut Outputs<'_>) -> Result<()> {
        let sessions = self.read_sessions()?;
        let features = features::read_features_jsonl(&self.layout.path(FEATURES))?;
        let profiles = self.profiles()?;
        let impressions = sessions.iter().flat_map(|s| s.impressions.iter().cloned()).collect();
        let (cohort, _) = CohortDataset::new(impressions, profiles.clone());
        let epoch = audit::dataset_epoch(&cohort)
            .ok_or_else(|| Error::Config("no impressions left after sessionization".into()))?;
        let build = audit::build_cells(&cohort, &features, epoch)?;
        let rows = audit::audit_report(&build.cells, &profiles, &self.config.audit.categories)?;
        out.write(CELLS, &jsonl(&build.cells)?)?;
        let mut buf = Vec::new();
        audit::write_report(&mut buf, &rows)?;
        out.write(AUDIT_REPORT, &buf)?;
        out.count("epoch", epoch);
        out.count("user_weeks", build.cells.len());
        out.count("active_user_weeks", build.cells.iter().filter(|c| c.active).count());
        out.count("impressions_without_features", build.missing_features);
        Ok(())
    }

    fn nbr(&self, out: &mut Outputs<'_>) -> Result<()> {
        let cells: Vec<ExposureCell> = reconstruct::read_jsonl(&self.layout.path(CELLS))?;
        let profiles = self.profiles()?;
        let cfg = &self.config.nbr;
        let results: Vec<(String, Result<nbr::CategoryFits>)> = cfg
            .categories
            .par_iter()
            .map(|c| (c.clone(), nbr::run_category(&cells, &profiles, c, cfg)))
            .collect();
        let mut fits = Vec::new();
        let mut failed = 0;
        for (category, r) in results {
            let slug = nbr::slug(&category);
            match r {
                Ok(f) => {
                    let mut buf = Vec::new();
                    nbr::write_irr_csv(&mut buf, &f.main.irr)?;
                    out.write(&format!("nbr_{slug}_main.csv"), &buf)?;
                    if f.interaction.is_some() {
                        let mut buf = Vec::new();
                        nbr::write_irr_csv(&mut buf, &f.interaction_rows())?;
                        out.write(&format!("nbr_{slug}_interactions.csv"), &buf)?;
                    }
                    fits.push(json!({"category": category, "status": "ok", "fits": f}));
                }
                Err(e) => {
                    log::error!("NBR for {category} failed: {e}");
                    failed += 1;
                    fits.push(json!({"category": category, "status": "failed", "error": e.to_string()}));
                }
            }
        }
        out.write(NBR_FITS, &serde_json::to_vec_pretty(&fits)?)?;
        out.count("categories", cfg.categories.len());
        out.count("categories_failed", failed);
        Ok(())
    }

    fn reconstruct(&self, out: &mut Outputs<'_>) -> Result<()> {
        let sessions = self.read_sessions()?;
        let features: BTreeMap<String, AdFeatures> = features::read_features_jsonl(&self.layout.path(FEATURES))?;
        // Sessions touching an ad whose features were rejected are skipped.
        let usable: Vec<Session> = sessions
            .into_iter()
            .filter(|s| s.impressions.iter().all(|i| features.contains_key(&i.ad_id)))
            .collect();
        let client = self.client()?;
        let run = reconstruct::reconstruct(
            &usable,
            &features,
            &self.config.reconstruct,
            self.config.seed,
            &client,
            &self.templates()?,
        )?;
        out.write(SESSION_PREDICTIONS, &jsonl(&run.sessions)?)?;
        out.write(USER_PREDICTIONS, &jsonl(&run.users)?)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "condition", "reason"])?;
        for (id, cond, reason) in &run.failures {
            w.write_record([id.as_str(), cond.name(), reason.as_str()])?;
        }
        let buf = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        out.write(RECONSTRUCT_FAILURES, &buf)?;
        out.count("sessions_usable", usable.len());
        out.count("session_predictions", run.sessions.len());
        out.count("user_predictions", run.users.len());
        out.count("failures", run.failures.len());
        log::info!("reconstruct: {:?}", client_stats(&client));
        Ok(())
    }

    fn evaluate(&self, out: &mut Outputs<'_>) -> Result<()> {
        let sessions: Vec<SessionPrediction> = reconstruct::read_jsonl(&self.layout.path(SESSION_PREDICTIONS))?;
        let users: Vec<UserPrediction> = reconstruct::read_jsonl(&self.layout.path(USER_PREDICTIONS))?;
        let profiles = self.profiles()?;
        let sec = &self.config.evaluate;
        let prior = match &sec.prior {
            Some(p) => CensusPrior::load(p, &sec.eval.rules)?,
            None => CensusPrior::bundled(&sec.eval.rules)?,
        };
        let report = evaluate::evaluate(&profiles, &sessions, &users, Some(&prior), &sec.eval, self.config.seed)?;
        out.write(CENSUS_PRIOR, prior.to_csv().as_bytes())?;
        let mut buf = Vec::new();
        evaluate::write_eval_csv(&mut buf, &report.rows)?;
        out.write(EVAL_REPORT, &buf)?;
        let mut buf = Vec::new();
        evaluate::write_lenient_csv(&mut buf, &report.lenient)?;
        out.write(EVAL_LENIENT, &buf)?;
        let meta = json!({
            "seed": report.seed,
            "sampling_runs": report.sampling_runs,
            "prior_provenance": report.prior_provenance,
            "macro_f1_universe": report.macro_f1_universe,
            "lenient_f1_construction": report.lenient_f1_construction,
            "abstention_policy": report.abstention_policy,
        });
        out.write(EVAL_METADATA, &serde_json::to_vec_pretty(&meta)?)?;
        out.count("rows", report.rows.len());
        Ok(())
    }

    fn update_manifest(&self, stage: Stage, record: StageRecord) -> Result<()> {
        let path = self.layout.manifest();
        let mut manifest = match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice::<RunManifest>(&bytes).ok(),
            Err(_) => None,
        }
        .filter(|m| m.config == self.config)
        .unwrap_or_else(|| RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.config.seed,
            taxonomy_version: String::new(),
            backend: String::new(),
            config: self.config.clone(),
            stages: BTreeMap::new(),
        });
        manifest.taxonomy_version = self.taxonomy()?.version().to_string();
        manifest.backend = match self.config.backend.kind {
            BackendKind::Mock => self.backend()?.tag(),
            BackendKind::Http => format!("http:{}", self.config.backend.http.model),
        };
        manifest.stages.insert(stage, record);
        let bytes = serde_json::to_vec_pretty(&manifest)?;
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }
}

fn client_stats(client: &LlmClient) -> (u64, u64) {
    use std::sync::atomic::Ordering;
    let s = &client.stats;
    (
        s.backend_calls.load(Ordering::Relaxed),
        s.cache_hits.load(Ordering::Relaxed),
    )
}
