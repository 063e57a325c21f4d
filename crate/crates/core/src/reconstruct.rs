//! Two-stage profile reconstruction: per-session zero-shot predictions with
//! reasoning summaries, then per-user aggregation over the summaries.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::demographics::Attribute;
use crate::error::{Error, Result};
use crate::features::{reask_prompt, AdFeatures};
use crate::llm::mock::AU_PARTY_LABELS;
use crate::llm::{extract_json_object, BackendRequest, LlmClient, SamplingSettings};
use crate::sessionize::Session;
use crate::template::{self, Context, Fields, TemplateSet};

/// Recorded in place of a literal the model would not map into the closed set.
pub const ABSTAIN: &str = "ABSTAIN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Sequential,
    Shuffled,
    /// Sequential with the Australian-context user prompt.
    SequentialAu,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::Sequential => "sequential",
            Condition::Shuffled => "shuffled",
            Condition::SequentialAu => "sequential_au",
        }
    }

    fn user_template(self) -> &'static str {
        match self {
            Condition::Sequential => template::USER_SEQUENTIAL,
            Condition::Shuffled => template::USER_SHUFFLED,
            Condition::SequentialAu => template::USER_AU,
        }
    }

    /// Session-level condition whose summaries feed this user condition.
    fn session_source(self) -> Condition {
        match self {
            Condition::Shuffled => Condition::Shuffled,
            _ => Condition::Sequential,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionPrediction {
    pub session_id: String,
    pub user_id: String,
    pub condition: Condition,
    pub predictions: BTreeMap<Attribute, String>,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserPrediction {
    pub user_id: String,
    pub condition: Condition,
    pub predictions: BTreeMap<Attribute, String>,
    pub n_sessions_used: usize,
}

fn unify(raw: &str) -> String {
    let s: String = raw
        .chars()
        .map(|c| match c {
            '\u{2010}'..='\u{2015}' | '\u{2212}' => '-',
            _ => c,
        })
        .collect();
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Party spellings outside the closed set that map onto it.
const PARTY_ALIASES: [(&str, &str); 9] = [
    ("labour", "Labor"),
    ("labor party", "Labor"),
    ("the greens", "Greens"),
    ("green", "Greens"),
    ("liberal", "Liberal (National Coalition)"),
    ("liberals", "Liberal (National Coalition)"),
    ("national", "Liberal (National Coalition)"),
    ("nationals", "Liberal (National Coalition)"),
    ("coalition", "Liberal (National Coalition)"),
];

/// Maps a model literal onto the attribute's prediction set after case,
/// whitespace and dash normalization and the party alias table.
pub fn normalize_label(attribute: Attribute, raw: &str) -> Option<&'static str> {
    let s = unify(raw.trim().trim_matches(|c| c == '"' || c == '\'' || c == '.'));
    let labels = attribute.prediction_labels();
    if let Some(l) = labels.iter().find(|l| unify(l) == s) {
        return Some(l);
    }
    if attribute == Attribute::Party {
        return PARTY_ALIASES
            .iter()
            .find(|(alias, _)| *alias == s)
            .map(|(_, lit)| *lit);
    }
    None
}

/// Allowed literals per attribute, one line each, for the prompt.
pub fn label_options(au: bool) -> String {
    Attribute::ALL
        .iter()
        .map(|&a| {
            let labels: Vec<String> = if au && a == Attribute::Party {
                AU_PARTY_LABELS.iter().map(|l| format!("\"{l}\"")).collect()
            } else {
                a.prediction_labels().iter().map(|l| format!("\"{l}\"")).collect()
            };
            format!("{}: {}", a.name(), labels.join(", "))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Seeded permutation of `0..n` keyed by an identifier.
pub fn permutation(seed: u64, key: &str, n: usize) -> Vec<usize> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Features of the session's ads, in presentation order for the condition.
pub fn session_features<'a>(
    session: &Session,
    features: &'a BTreeMap<String, AdFeatures>,
    condition: Condition,
    seed: u64,
) -> Result<Vec<&'a AdFeatures>> {
    let missing: Vec<String> = session
        .impressions
        .iter()
        .filter(|i| !features.contains_key(&i.ad_id))
        .map(|i| i.ad_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFeatures(missing));
    }
    let ordered: Vec<&AdFeatures> = session.impressions.iter().map(|i| &features[&i.ad_id]).collect();
    Ok(match condition {
        Condition::Shuffled => permutation(seed, &session.session_id, ordered.len())
            .into_iter()
            .map(|k| ordered[k])
            .collect(),
        _ => ordered,
    })
}

fn ad_fields(i: usize, f: &AdFeatures) -> Fields {
    let mut m = Fields::new();
    m.insert("i".into(), i.to_string());
    m.insert("caption".into(), f.caption.clone());
    m.insert("iab_category_tier_1".into(), f.iab_categories.join(", "));
    m.insert("descriptive_category".into(), f.descriptive_categories.join(", "));
    m.insert("key_entities_in_images_and_slogan".into(), f.key_entities.join(", "));
    m
}

pub fn render_session_prompt(ads: &[&AdFeatures], templates: &TemplateSet) -> Result<String> {
    let items = ads.iter().enumerate().map(|(i, f)| ad_fields(i + 1, f)).collect();
    let ctx = Context::new()
        .block("ads", items)
        .var("label_options", label_options(false));
    templates.get(template::SESSION)?.render(&ctx)
}

pub fn render_user_prompt(summaries: &[&str], condition: Condition, templates: &TemplateSet) -> Result<String> {
    let items = summaries
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut m = Fields::new();
            m.insert("i".into(), (i + 1).to_string());
            m.insert("summary".into(), s.to_string());
            m
        })
        .collect();
    let ctx = Context::new()
        .block("sessions", items)
        .var("label_options", label_options(condition == Condition::SequentialAu));
    templates.get(condition.user_template())?.render(&ctx)
}

type Parsed = (BTreeMap<Attribute, Option<&'static str>>, Option<String>);

fn invalid(reason: impl Into<String>, raw: &str) -> Error {
    Error::Validation {
        reason: reason.into(),
        raw: raw.to_string(),
    }
}

/// Parses a demographic response. Unmappable literals come back as `None`;
/// structural problems are validation errors.
pub fn parse_response(raw: &str, needs_summary: bool) -> Result<Parsed> {
    let obj = extract_json_object(raw).ok_or_else(|| invalid("no JSON object", raw))?;
    let v: Value = serde_json::from_str(obj).map_err(|e| invalid(format!("bad JSON: {e}"), raw))?;
    let preds = v
        .get("predictions")
        .and_then(Value::as_object)
        .ok_or_else(|| invalid("missing predictions object", raw))?;
    let mut out = BTreeMap::new();
    for attr in Attribute::ALL {
        let value = preds
            .get(attr.name())
            .and_then(Value::as_str)
            .ok_or_else(|| invalid(format!("missing prediction for {attr}"), raw))?;
        out.insert(attr, normalize_label(attr, value));
    }
    let summary = match v.get("summary").and_then(Value::as_str).map(str::trim) {
        Some(s) if !s.is_empty() => Some(s.to_string()),
        _ if needs_summary => return Err(invalid("missing summary", raw)),
        _ => None,
    };
    Ok((out, summary))
}

/// Calls the backend, re-asking once on a malformed response or on any
/// unmappable literal. Literals still unmappable become [`ABSTAIN`].
fn predict(
    client: &LlmClient,
    template_id: &str,
    prompt: String,
    subject: &str,
    settings: SamplingSettings,
    needs_summary: bool,
) -> Result<(BTreeMap<Attribute, String>, Option<String>)> {
    let request = |p: String| BackendRequest::new(template_id, p, settings).with_subject(subject);
    let first = client.call(&request(prompt.clone()))?;
    let (mut preds, summary) = match parse_response(&first.raw, needs_summary) {
        Ok(p) => p,
        Err(Error::Validation { reason, .. }) => {
            log::info!("{subject}: re-asking after invalid response ({reason})");
            let second = client.call(&request(reask_prompt(&prompt, &reason)))?;
            let (p, s) = parse_response(&second.raw, needs_summary)?;
            return Ok((finish(p), s));
        }
        Err(e) => return Err(e),
    };
    let bad: Vec<Attribute> = preds.iter().filter(|(_, v)| v.is_none()).map(|(a, _)| *a).collect();
    if !bad.is_empty() {
        let names: Vec<&str> = bad.iter().map(|a| a.name()).collect();
        let reason = format!("values for {} are not among the allowed options", names.join(", "));
        let second = client.call(&request(reask_prompt(&prompt, &reason)))?;
        if let Ok((again, _)) = parse_response(&second.raw, false) {
            for a in bad {
                preds.insert(a, again[&a]);
            }
        }
    }
    Ok((finish(preds), summary))
}

fn finish(preds: BTreeMap<Attribute, Option<&'static str>>) -> BTreeMap<Attribute, String> {
    preds
        .into_iter()
        .map(|(a, v)| (a, v.unwrap_or(ABSTAIN).to_string()))
        .collect()
}

pub fn predict_session(
    session: &Session,
    features: &BTreeMap<String, AdFeatures>,
    condition: Condition,
    seed: u64,
    client: &LlmClient,
    templates: &TemplateSet,
    settings: SamplingSettings,
) -> Result<SessionPrediction> {
    let ads = session_features(session, features, condition, seed)?;
    let prompt = render_session_prompt(&ads, templates)?;
    let (predictions, summary) = predict(client, template::SESSION, prompt, &session.user_id, settings, true)?;
    Ok(SessionPrediction {
        session_id: session.session_id.clone(),
        user_id: session.user_id.clone(),
        condition,
        predictions,
        summary: summary.expect("summary required"),
    })
}

/// `summaries` must be in chronological order; the shuffled condition
/// reorders them with a permutation keyed by the user id.
pub fn predict_user(
    user_id: &str,
    summaries: &[&str],
    condition: Condition,
    seed: u64,
    client: &LlmClient,
    templates: &TemplateSet,
    settings: SamplingSettings,
) -> Result<UserPrediction> {
    let ordered: Vec<&str> = match condition {
        Condition::Shuffled => permutation(seed, user_id, summaries.len())
            .into_iter()
            .map(|k| summaries[k])
            .collect(),
        _ => summaries.to_vec(),
    };
    let prompt = render_user_prompt(&ordered, condition, templates)?;
    let (predictions, _) = predict(client, condition.user_template(), prompt, user_id, settings, false)?;
    Ok(UserPrediction {
        user_id: user_id.to_string(),
        condition,
        predictions,
        n_sessions_used: summaries.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructConfig {
    pub session_conditions: Vec<Condition>,
    pub user_conditions: Vec<Condition>,
    pub settings: SamplingSettings,
    /// Fewest session summaries a user needs for a user-level prediction.
    pub min_sessions: usize,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        ReconstructConfig {
            session_conditions: vec![Condition::Sequential, Condition::Shuffled],
            user_conditions: vec![Condition::Sequential, Condition::Shuffled, Condition::SequentialAu],
            settings: SamplingSettings::RECONSTRUCTION,
            min_sessions: 3,
        }
    }
}

#[derive(Debug, Default)]
pub struct ReconstructRun {
    pub sessions: Vec<SessionPrediction>,
    pub users: Vec<UserPrediction>,
    /// (session or user id, condition, reason) for responses that stayed
    /// malformed after the re-ask.
    pub failures: Vec<(String, Condition, String)>,
}

fn collect<T>(
    results: Vec<(String, Condition, Result<T>)>,
    failures: &mut Vec<(String, Condition, String)>,
) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(results.len());
    for (id, cond, r) in results {
        match r {
            Ok(v) => out.push(v),
            Err(Error::Validation { reason, .. }) => {
                log::warn!("{id} ({cond}): no usable response: {reason}");
                failures.push((id, cond, reason));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Runs every configured condition over `sessions` (grouped by user, in
/// chronological order). Output order is independent of parallelism.
pub fn reconstruct(
    sessions: &[Session],
    features: &BTreeMap<String, AdFeatures>,
    config: &ReconstructConfig,
    seed: u64,
    client: &LlmClient,
    templates: &TemplateSet,
) -> Result<ReconstructRun> {
    let mut needed: Vec<Condition> = config.session_conditions.clone();
    for c in &config.user_conditions {
        if !needed.contains(&c.session_source()) {
            needed.push(c.session_source());
        }
    }
    needed.sort();
    let jobs: Vec<(&Session, Condition)> = needed
        .iter()
        .flat_map(|&c| sessions.iter().map(move |s| (s, c)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(s, c)| {
            let r = predict_session(s, features, c, seed, client, templates, config.settings);
            (s.session_id.clone(), c, r)
        })
        .collect();
    let mut run = ReconstructRun::default();
    let all_sessions = collect(results, &mut run.failures)?;

    let mut by_user: BTreeMap<(Condition, &str), Vec<&SessionPrediction>> = BTreeMap::new();
    for p in &all_sessions {
        by_user.entry((p.condition, p.user_id.as_str())).or_default().push(p);
    }
    let mut user_conds = config.user_conditions.clone();
    user_conds.sort();
    user_conds.dedup();
    let user_jobs: Vec<(Condition, &str, Vec<&str>)> = user_conds
        .iter()
        .flat_map(|&c| {
            by_user
                .iter()
                .filter(move |((sc, _), _)| *sc == c.session_source())
                .map(move |((_, u), ps)| (c, *u, ps.iter().map(|p| p.summary.as_str()).collect()))
        })
        .filter(|(c, u, s): &(Condition, &str, Vec<&str>)| {
            let ok = s.len() >= config.min_sessions;
            if !ok {
                log::warn!("{u} ({c}): only {} session summaries; skipped", s.len());
            }
            ok
        })
        .collect();
    let results = user_jobs
        .par_iter()
        .map(|(c, u, s)| {
            let r = predict_user(u, s, *c, seed, client, templates, config.settings);
            (u.to_string(), *c, r)
        })
        .collect();
    run.users = collect(results, &mut run.failures)?;
    run.sessions = all_sessions
        .into_iter()
        .filter(|p| config.session_conditions.contains(&p.condition))
        .collect();
    Ok(run)
}

pub fn write_jsonl<W: Write, T: Serialize>(mut w: W, records: &[T]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io("<jsonl>", e))?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::MalformedRow {
            row: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_label(Attribute::Party, "labour"), Some("Labor"));
        assert_eq!(normalize_label(Attribute::Party, "National"), Some("Liberal (National Coalition)"));
        assert_eq!(normalize_label(Attribute::Party, " LIBERAL "), Some("Liberal (National Coalition)"));
        assert_eq!(normalize_label(Attribute::Age, "25 – 34"), None);
        assert_eq!(normalize_label(Attribute::Age, "25–34"), Some("25-34"));
        assert_eq!(normalize_label(Attribute::Gender, "  male"), Some("Male"));
        assert_eq!(normalize_label(Attribute::Employment, "student"), None);
        assert_eq!(normalize_label(Attribute::Gender, "Other"), None);
        assert_eq!(normalize_label(Attribute::Income, "Prefer not to say"), None);
    }

    #[test]
    fn permutations_are_seeded() {
        let a = permutation(7, "u#00001", 10);
        assert_eq!(a, permutation(7, "u#00001", 10));
        assert_ne!(a, permutation(7, "u#00002", 10));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn response_parsing() {
        let raw = r#"```json
{"predictions": {"gender": "male", "age": "18-24", "income": "$1-$15,599",
 "education": "Bachelor degree level", "employment": "student", "party": "Labour"},
 "summary": "Mostly retail."}
```"#;
        let (p, s) = parse_response(raw, true).unwrap();
        assert_eq!(p[&Attribute::Gender], Some("Male"));
        assert_eq!(p[&Attribute::Employment], None);
        assert_eq!(p[&Attribute::Party], Some("Labor"));
        assert_eq!(s.as_deref(), Some("Mostly retail."));
        assert!(parse_response(r#"{"predictions": {}}"#, false).is_err());
        assert!(parse_response(r#"{"predictions": {"gender": "Male", "age": "18-24", "income": "$1-$15,599", "education": "Bachelor degree level", "employment": "Retired", "party": "None"}}"#, true).is_err());
    }

    #[test]
    fn label_options_per_variant() {
        assert!(label_options(true).contains("\"National\""));
        assert!(!label_options(false).contains("\"National\""));
        assert!(!label_options(false).contains("Prefer not to say"));
    }
}
