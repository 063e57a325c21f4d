//! Structured per-ad features obtained from the model backend.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::ingest::AdImpression;
use crate::llm::{extract_json_object, BackendRequest, LlmClient, SamplingSettings};
use crate::template::{self, Context, TemplateSet};

pub const TAXONOMY_SIZE: usize = 45;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdFeatures {
    pub ad_id: String,
    pub caption: String,
    pub descriptive_categories: Vec<String>,
    pub iab_categories: Vec<String>,
    pub key_entities: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IabTaxonomy {
    entries: Vec<String>,
    version: String,
}

impl IabTaxonomy {
    pub fn builtin() -> Self {
        Self::parse(include_str!("../assets/iab_tier1.txt")).expect("bundled taxonomy is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// One name per line; blank lines and `#` comments ignored; an optional
    /// `# version: <tag>` comment names the list.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut version = "unversioned".to_string();
        let mut seen = HashSet::new();
        for line in text.lines() {
            let line = line.trim();
            if let Some(c) = line.strip_prefix('#') {
                if let Some(v) = c.trim().strip_prefix("version:") {
                    version = v.trim().to_string();
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            if !seen.insert(line.to_lowercase()) {
                return Err(Error::Taxonomy(format!("duplicate entry {line:?}")));
            }
            entries.push(line.to_string());
        }
        if entries.len() != TAXONOMY_SIZE {
            return Err(Error::Taxonomy(format!(
                "expected {TAXONOMY_SIZE} entries, found {}",
                entries.len()
            )));
        }
        Ok(IabTaxonomy { entries, version })
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e == name)
    }

    /// Maps a model-supplied label onto the taxonomy: case-insensitive exact
    /// match first, then the closest prefix match in either direction
    /// (smallest length difference, earliest entry on ties). Labels shorter
    /// than three characters only match exactly.
    pub fn map_label(&self, raw: &str) -> Option<&str> {
        let label = raw.trim().to_lowercase();
        if label.is_empty() {
            return None;
        }
        if let Some(e) = self.entries.iter().find(|e| e.to_lowercase() == label) {
            return Some(e);
        }
        if label.chars().count() < 3 {
            return None;
        }
        self.entries
            .iter()
            .filter(|e| {
                let el = e.to_lowercase();
                el.starts_with(&label) || label.starts_with(&el)
            })
            .min_by_key(|e| e.len().abs_diff(label.len()))
            .map(String::as_str)
    }
}

fn string_list(v: Option<&Value>, key: &str) -> std::result::Result<Vec<String>, String> {
    let items: Vec<String> = match v {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::String(s)) => vec![s.clone()],
        Some(Value::Array(a)) => a
            .iter()
            .map(|x| {
                x.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| format!("{key} contains a non-string item"))
            })
            .collect::<std::result::Result<_, _>>()?,
        Some(_) => return Err(format!("{key} must be a list of strings")),
    };
    Ok(dedupe(items))
}

/// Trims, drops blanks and removes repeats, keeping first occurrences.
fn dedupe(items: Vec<String>) -> Vec<String> {
    let mut seen = HashSet::new();
    items
        .into_iter()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty() && seen.insert(s.clone()))
        .collect()
}

/// Strictly parses a structured feature response.
pub fn validate_features(ad_id: &str, raw: &str, taxonomy: &IabTaxonomy) -> Result<AdFeatures> {
    let reject = |reason: String| Error::Validation {
        reason,
        raw: raw.to_string(),
    };
    let body = extract_json_object(raw).ok_or_else(|| reject("no JSON object found".into()))?;
    let v: Value = serde_json::from_str(body).map_err(|e| reject(format!("invalid JSON: {e}")))?;
    let obj = v
        .as_object()
        .ok_or_else(|| reject("response is not a JSON object".into()))?;
    let caption = obj
        .get("caption")
        .and_then(Value::as_str)
        .map(str::trim)
        .unwrap_or("");
    if caption.is_empty() {
        return Err(reject("empty caption".into()));
    }
    let descriptive = string_list(obj.get("descriptive_category"), "descriptive_category").map_err(reject)?;
    let entities = string_list(
        obj.get("key_entities_in_images_and_slogan"),
        "key_entities_in_images_and_slogan",
    )
    .map_err(reject)?;
    if entities.is_empty() {
        return Err(reject("empty key_entities_in_images_and_slogan".into()));
    }
    let raw_iab = string_list(obj.get("iab_category_tier_1"), "iab_category_tier_1").map_err(reject)?;
    if raw_iab.is_empty() {
        return Err(reject("empty iab_category_tier_1".into()));
    }
    let mut iab = Vec::new();
    for label in &raw_iab {
        match taxonomy.map_label(label) {
            Some(m) => {
                if m != label {
                    log::debug!("ad {ad_id}: IAB label {label:?} mapped to {m:?}");
                }
                iab.push(m.to_string());
            }
            None => log::warn!("ad {ad_id}: dropping out-of-taxonomy IAB label {label:?}"),
        }
    }
    let iab = dedupe(iab);
    if iab.is_empty() {
        return Err(reject(format!(
            "no IAB label maps onto the taxonomy: {raw_iab:?}"
        )));
    }
    Ok(AdFeatures {
        ad_id: ad_id.to_string(),
        caption: caption.to_string(),
        descriptive_categories: descriptive,
        iab_categories: iab,
        key_entities: entities,
    })
}

pub fn image_marker(n: usize) -> String {
    if n == 0 {
        "[no image attached]".to_string()
    } else {
        (1..=n)
            .map(|i| format!("[attached image {i}]"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn render_features_prompt(
    ad: &AdImpression,
    taxonomy: &IabTaxonomy,
    templates: &TemplateSet,
) -> Result<String> {
    let ctx = Context::new()
        .var("image(s)", image_marker(ad.image_refs.len()))
        .var("title", ad.title.as_str())
        .var("upper_texts_str", ad.body.as_str())
        .var("iab_list", taxonomy.entries().join("\n"));
    templates.get(template::FEATURES)?.render(&ctx)
}

pub fn reask_prompt(prompt: &str, reason: &str) -> String {
    format!(
        "{prompt}\n\nYour previous response could not be used ({reason}). \
         Respond again with only the JSON object described above."
    )
}

/// Extracts features for one ad, re-asking once on an invalid response.
pub fn extract_features(
    ad: &AdImpression,
    taxonomy: &IabTaxonomy,
    client: &LlmClient,
    templates: &TemplateSet,
    settings: SamplingSettings,
) -> Result<AdFeatures> {
    let prompt = render_features_prompt(ad, taxonomy, templates)?;
    let req = BackendRequest::new(template::FEATURES, prompt.clone(), settings)
        .with_images(ad.image_refs.clone());
    let first = client.call(&req)?;
    match validate_features(&ad.ad_id, &first.raw, taxonomy) {
        Ok(f) => Ok(f),
        Err(Error::Validation { reason, .. }) => {
            log::info!("ad {}: re-asking after invalid response ({reason})", ad.ad_id);
            let retry = BackendRequest::new(template::FEATURES, reask_prompt(&prompt, &reason), settings)
                .with_images(ad.image_refs.clone());
            let second = client.call(&retry)?;
            validate_features(&ad.ad_id, &second.raw, taxonomy)
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Default)]
pub struct FeatureRun {
    pub features: BTreeMap<String, AdFeatures>,
    /// Ads whose responses stayed invalid after the re-ask.
    pub rejected: BTreeMap<String, String>,
}

/// Extracts features for every distinct ad id (first occurrence wins).
/// Validation failures are collected; transport failures abort the run.
pub fn extract_corpus(
    impressions: &[AdImpression],
    taxonomy: &IabTaxonomy,
    client: &LlmClient,
    templates: &TemplateSet,
    settings: SamplingSettings,
) -> Result<FeatureRun> {
    let mut seen = HashSet::new();
    let unique: Vec<&AdImpression> = impressions
        .iter()
        .filter(|i| seen.insert(i.ad_id.as_str()))
        .collect();
    let results: Vec<(String, Result<AdFeatures>)> = unique
        .par_iter()
        .map(|ad| {
            (
                ad.ad_id.clone(),
                extract_features(ad, taxonomy, client, templates, settings),
            )
        })
        .collect();
    let mut run = FeatureRun::default();
    for (id, r) in results {
        match r {
            Ok(f) => {
                run.features.insert(id, f);
            }
            Err(Error::Validation { reason, .. }) => {
                log::warn!("ad {id}: rejected after re-ask: {reason}");
                run.rejected.insert(id, reason);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(run)
}

pub fn write_features_jsonl<W: Write>(mut w: W, features: &BTreeMap<String, AdFeatures>) -> Result<()> {
    for f in features.values() {
        serde_json::to_writer(&mut w, f)?;
        w.write_all(b"\n").map_err(|e| Error::io("<features>", e))?;
    }
    Ok(())
}

pub fn read_features_jsonl(path: &Path) -> Result<BTreeMap<String, AdFeatures>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: AdFeatures = serde_json::from_str(&line).map_err(|e| Error::MalformedRow {
            row: i + 1,
            message: e.to_string(),
        })?;
        out.insert(f.ad_id.clone(), f);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tax() -> IabTaxonomy {
        IabTaxonomy::builtin()
    }

    #[test]
    fn builtin_taxonomy_shape() {
        let t = tax();
        assert_eq!(t.entries().len(), 45);
        for name in ["Retail", "Politics", "Gambling", "Alcohol", "Education and Careers"] {
            assert!(t.contains(name), "{name}");
        }
        assert_eq!(t.version(), "iab-tier1-standin-1");
    }

    #[test]
    fn taxonomy_rejects_wrong_size_and_duplicates() {
        assert!(IabTaxonomy::parse("Retail\nPolitics\n").is_err());
        let mut text: String = tax().entries().join("\n");
        text.push_str("\nretail");
        assert!(IabTaxonomy::parse(&text).is_err());
    }

    #[test]
    fn label_mapping() {
        let t = tax();
        assert_eq!(t.map_label("retail"), Some("Retail"));
        assert_eq!(t.map_label("Retailing"), Some("Retail"));
        assert_eq!(t.map_label("Education"), Some("Education and Careers"));
        assert_eq!(t.map_label("Sport"), Some("Sports"));
        assert_eq!(t.map_label("Quantum Widgets"), None);
        assert_eq!(t.map_label("Al"), None);
    }

    fn ok_json() -> String {
        r#"{"caption": "A solar battery ad", "descriptive_category": ["modern", "modern"],
            "iab_category_tier_1": ["Retailing", "Utilities and Energy"],
            "key_entities_in_images_and_slogan": ["Tesla Powerwall"]}"#
            .to_string()
    }

    #[test]
    fn validates_well_formed() {
        let f = validate_features("a1", &ok_json(), &tax()).unwrap();
        assert_eq!(f.iab_categories, vec!["Retail", "Utilities and Energy"]);
        assert_eq!(f.descriptive_categories, vec!["modern"]);
    }

    #[test]
    fn rejects_empty_fields() {
        let t = tax();
        let empty_caption = ok_json().replace("A solar battery ad", " ");
        assert!(matches!(
            validate_features("a", &empty_caption, &t),
            Err(Error::Validation { .. })
        ));
        let no_iab = ok_json().replace(r#"["Retailing", "Utilities and Energy"]"#, "[]");
        assert!(validate_features("a", &no_iab, &t).is_err());
        let no_entities = ok_json().replace(r#"["Tesla Powerwall"]"#, "[]");
        assert!(validate_features("a", &no_entities, &t).is_err());
        let unmappable = ok_json().replace(r#"["Retailing", "Utilities and Energy"]"#, r#"["Zzzz"]"#);
        match validate_features("a", &unmappable, &t) {
            Err(Error::Validation { raw, .. }) => assert!(raw.contains("Zzzz")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(validate_features("a", "not json", &t).is_err());
    }

    proptest! {
        #[test]
        fn mapped_labels_are_members(label in "[A-Za-z &]{0,30}") {
            let t = tax();
            if let Some(m) = t.map_label(&label) {
                prop_assert!(t.contains(m));
            }
        }

        #[test]
        fn features_round_trip(caption in "[a-z ]{1,20}", ents in proptest::collection::vec("[A-Z][a-z]{1,8}", 1..4)) {
            let f = AdFeatures {
                ad_id: "x".into(),
                caption,
                descriptive_categories: vec!["bold".into()],
                iab_categories: vec!["Retail".into()],
                key_entities: ents,
            };
            let s = serde_json::to_string(&f).unwrap();
            prop_assert_eq!(serde_json::from_str::<AdFeatures>(&s).unwrap(), f);
        }
    }
}
