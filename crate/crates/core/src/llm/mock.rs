//! Deterministic stand-in backend.
//!
//! Every response is a pure function of the seed, the configuration and the
//! request hash. Feature requests get a keyword-driven schema-valid answer;
//! demographic requests draw each attribute from a configurable bias rule,
//! optionally anchored on injected ground truth so end-to-end accuracy is
//! known in advance.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, BackendRequest};
use crate::demographics::{Attribute, DemographicProfile};
use crate::features::IabTaxonomy;
use crate::template;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasRule {
    /// Predict the true class with probability `p`, otherwise a label drawn
    /// uniformly from the attribute's prediction set. `p = 0` is uniform
    /// guessing; with no known truth the rule degrades to uniform.
    TruthWithProb(f64),
    /// Emit this literal verbatim.
    Constant(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiasTable {
    pub default: BiasRule,
    pub per_attribute: BTreeMap<Attribute, BiasRule>,
}

impl Default for BiasTable {
    fn default() -> Self {
        BiasTable {
            default: BiasRule::TruthWithProb(0.0),
            per_attribute: BTreeMap::new(),
        }
    }
}

impl BiasTable {
    pub fn uniform() -> Self {
        Self::default()
    }

    pub fn truth(p: f64) -> Self {
        BiasTable {
            default: BiasRule::TruthWithProb(p),
            per_attribute: BTreeMap::new(),
        }
    }

    pub fn with(mut self, attribute: Attribute, rule: BiasRule) -> Self {
        self.per_attribute.insert(attribute, rule);
        self
    }

    pub fn rule(&self, attribute: Attribute) -> &BiasRule {
        self.per_attribute.get(&attribute).unwrap_or(&self.default)
    }
}

pub const AU_PARTY_LABELS: [&str; 6] = ["Labor", "Greens", "Liberal", "National", "None", "Other"];

const STYLES: [&str; 10] = [
    "promotional",
    "informational",
    "lifestyle imagery",
    "urgent call to action",
    "testimonial",
    "aspirational",
    "humorous",
    "minimalist design",
    "discount-driven",
    "community-focused",
];

/// Keyword groups: any token in the first list selects the category and
/// caption phrase.
const KEYWORDS: &[(&[&str], &str, &str)] = &[
    (&["powerwall", "battery", "batteries", "solar"], "Utilities and Energy", "a home battery and solar energy product"),
    (&["bet", "bets", "betting", "casino", "pokies", "odds", "wager"], "Gambling", "a betting service"),
    (&["beer", "wine", "vodka", "whisky", "gin", "spirits", "brewery"], "Alcohol", "alcoholic drinks"),
    (&["vote", "election", "senator", "candidate", "parliament", "policy"], "Politics", "a political message"),
    (&["course", "courses", "degree", "university", "career", "careers", "study", "tafe", "jobs"], "Education and Careers", "study and career opportunities"),
    (&["insurance", "insure"], "Insurance", "an insurance product"),
    (&["dress", "shoes", "fashion", "jacket", "sneakers"], "Clothing and Accessories", "clothing and accessories"),
    (&["pizza", "burger", "coffee", "snack", "recipe", "meal"], "Food and Drink", "food and drink"),
    (&["holiday", "flight", "flights", "hotel", "travel"], "Travel and Tourism", "travel deals"),
    (&["suv", "ute", "vehicle", "sedan", "dealership"], "Automotive", "a vehicle"),
    (&["sale", "off", "shop", "discount", "store", "deals"], "Retail", "a retail promotion"),
];

const OPENERS: [&str; 14] = [
    "Meet", "Get", "Shop", "The", "Buy", "Save", "Try", "New", "Discover", "Find", "Your", "Our",
    "Now", "Join",
];

#[derive(Debug, Clone)]
pub struct MockBackend {
    seed: u64,
    bias: BiasTable,
    truths: BTreeMap<String, DemographicProfile>,
    taxonomy: IabTaxonomy,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        MockBackend {
            seed,
            bias: BiasTable::default(),
            truths: BTreeMap::new(),
            taxonomy: IabTaxonomy::builtin(),
        }
    }

    pub fn with_bias(mut self, bias: BiasTable, truths: BTreeMap<String, DemographicProfile>) -> Self {
        self.bias = bias;
        self.truths = truths;
        self
    }

    pub fn with_taxonomy(mut self, taxonomy: IabTaxonomy) -> Self {
        self.taxonomy = taxonomy;
        self
    }

    fn rng_for(&self, request: &BackendRequest) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(request.hash().as_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    fn features(&self, request: &BackendRequest, rng: &mut ChaCha8Rng) -> String {
        let title = line_value(&request.prompt, "The title of the advertisment(s) is: ");
        let slogan = line_value(&request.prompt, "The provided marketing slogan for the advertisement(s) is: ");
        let text = format!("{title} {slogan}");
        let tokens: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect();
        let mut cats: Vec<&str> = Vec::new();
        let mut phrase = None;
        for (words, cat, p) in KEYWORDS {
            if cats.len() < 2 && tokens.iter().any(|t| words.contains(&t.as_str())) {
                cats.push(cat);
                phrase.get_or_insert(*p);
            }
        }
        if cats.is_empty() {
            let entries = self.taxonomy.entries();
            cats.push(&entries[rng.gen_range(0..entries.len())]);
        }
        let caption = match (phrase, title.is_empty()) {
            (Some(p), false) => format!("An advertisement for {p}, titled \"{title}\"."),
            (Some(p), true) => format!("An advertisement for {p}."),
            (None, false) => format!("An advertisement titled \"{title}\"."),
            (None, true) => "An image advertisement with no visible text.".to_string(),
        };
        let mut entities = capitalized_runs(title);
        for e in capitalized_runs(slogan) {
            if !entities.contains(&e) {
                entities.push(e);
            }
        }
        if entities.is_empty() {
            entities.push(
                tokens
                    .iter()
                    .find(|t| t.len() > 3)
                    .cloned()
                    .unwrap_or_else(|| "advertisement".into()),
            );
        }
        let a = rng.gen_range(0..STYLES.len());
        let b = (a + 1 + rng.gen_range(0..STYLES.len() - 1)) % STYLES.len();
        json!({
            "caption": caption,
            "descriptive_category": [STYLES[a], STYLES[b]],
            "iab_category_tier_1": cats,
            "key_entities_in_images_and_slogan": entities,
        })
        .to_string()
    }

    fn predictions(&self, request: &BackendRequest, rng: &mut ChaCha8Rng) -> String {
        let truth = request.subject.as_ref().and_then(|s| self.truths.get(s));
        let au = request.template_id == template::USER_AU;
        let mut preds = serde_json::Map::new();
        for attr in Attribute::ALL {
            let labels = attr.prediction_labels();
            // Draw both numbers unconditionally so every attribute consumes
            // the same amount of randomness.
            let u: f64 = rng.gen();
            let k = rng.gen_range(0..labels.len());
            let coin: bool = rng.gen();
            let value = match self.bias.rule(attr) {
                BiasRule::Constant(s) => s.clone(),
                BiasRule::TruthWithProb(p) => {
                    let t = truth.map(|t| t.level(attr)).filter(|l| labels.contains(l));
                    match t {
                        Some(t) if u < *p => t.to_string(),
                        _ => labels[k].to_string(),
                    }
                }
            };
            let value = if au && attr == Attribute::Party {
                match value.as_str() {
                    "Liberal (National Coalition)" if coin => "National".to_string(),
                    "Liberal (National Coalition)" => "Liberal".to_string(),
                    _ => value,
                }
            } else {
                value
            };
            preds.insert(attr.name().to_string(), value.into());
        }
        let mut out = json!({ "predictions": preds });
        if request.template_id == template::SESSION {
            out["summary"] = session_summary(&request.prompt).into();
        }
        out.to_string()
    }

    pub fn au_party_labels() -> &'static [&'static str] {
        &AU_PARTY_LABELS
    }
}

fn line_value<'a>(prompt: &'a str, prefix: &str) -> &'a str {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix(prefix))
        .map(|v| v.strip_suffix('.').unwrap_or(v).trim())
        .unwrap_or("")
}

fn capitalized_runs(text: &str) -> Vec<String> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut runs = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    let flush = |cur: &mut Vec<&str>, runs: &mut Vec<String>| {
        while cur.first().is_some_and(|w| OPENERS.contains(w)) {
            cur.remove(0);
        }
        if !cur.is_empty() {
            let run = cur.join(" ");
            if !runs.contains(&run) {
                runs.push(run);
            }
        }
        cur.clear();
    };
    for w in words {
        let clean = w.trim_matches(|c: char| !c.is_alphanumeric());
        if clean.starts_with(|c: char| c.is_uppercase()) {
            cur.push(clean);
            if w.ends_with([',', '.', '!', '?', ':', ';']) {
                flush(&mut cur, &mut runs);
            }
        } else {
            flush(&mut cur, &mut runs);
        }
    }
    flush(&mut cur, &mut runs);
    runs
}

fn session_summary(prompt: &str) -> String {
    let n = prompt.lines().filter(|l| l.contains(". Caption: ")).count();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in prompt.lines() {
        if let Some(c) = l.trim().strip_prefix("Category: ") {
            for cat in c.split(", ") {
                *counts.entry(cat.trim()).or_insert(0) += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let top: Vec<&str> = ranked.iter().take(2).map(|r| r.0).collect();
    let cats = match top.as_slice() {
        [] => "no identifiable category".to_string(),
        [a] => a.to_string(),
        [a, b, ..] => format!("{a} and {b}"),
    };
    format!(
        "This session contained {n} ads. The most frequent categories were {cats}. \
         The ads relied on a mix of promotional and informational messaging."
    )
}

impl Backend for MockBackend {
    fn tag(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.bias).expect("bias table serializes"));
        h.update(serde_json::to_vec(&self.truths).expect("profiles serialize"));
        h.update(self.taxonomy.entries().join("\n").as_bytes());
        let digest = hex::encode(h.finalize());
        format!("mock-{}-{}", self.seed, &digest[..12])
    }

    fn subject_sensitive(&self) -> bool {
        !self.truths.is_empty()
    }

    fn complete(&self, request: &BackendRequest) -> Result<String, BackendError> {
        let mut rng = self.rng_for(request);
        match request.template_id.as_str() {
            template::FEATURES => Ok(self.features(request, &mut rng)),
            template::SESSION
            | template::USER_SEQUENTIAL
            | template::USER_SHUFFLED
            | template::USER_AU => Ok(self.predictions(request, &mut rng)),
            other => Err(BackendError::fatal(format!(
                "mock backend has no responder for template {other:?}"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::SamplingSettings;

    fn feat_req(title: &str, slogan: &str) -> BackendRequest {
        let prompt = format!(
            "The title of the advertisment(s) is: {title}.\nThe provided marketing slogan for the advertisement(s) is: {slogan}.\n"
        );
        BackendRequest::new(template::FEATURES, prompt, SamplingSettings::EXTRACTION)
    }

    #[test]
    fn same_seed_same_output() {
        let r = feat_req("Weekend Sale", "50% off everything");
        assert_eq!(
            MockBackend::new(1).complete(&r).unwrap(),
            MockBackend::new(1).complete(&r).unwrap()
        );
    }

    #[test]
    fn entity_runs_skip_openers() {
        assert_eq!(
            capitalized_runs("Meet the Tesla Powerwall home battery"),
            vec!["Tesla Powerwall".to_string()]
        );
        assert_eq!(
            capitalized_runs("Bunnings, Woolworths and Mecca"),
            vec!["Bunnings", "Woolworths", "Mecca"]
        );
    }

    #[test]
    fn truth_rule_reproduces_profile() {
        use crate::demographics::*;
        let p = DemographicProfile {
            user_id: "u".into(),
            gender: Gender::Female,
            age_bracket: AgeBracket::Age35To44,
            income_bracket: IncomeBracket::From65000,
            education: Education::Postgraduate,
            employment: Employment::PartTime,
            party: Party::Greens,
        };
        let mut truths = BTreeMap::new();
        truths.insert("u".to_string(), p.clone());
        let m = MockBackend::new(3).with_bias(BiasTable::truth(1.0), truths);
        let r = BackendRequest::new(template::USER_SEQUENTIAL, "x".into(), SamplingSettings::RECONSTRUCTION)
            .with_subject("u");
        let v: serde_json::Value = serde_json::from_str(&m.complete(&r).unwrap()).unwrap();
        for attr in Attribute::ALL {
            assert_eq!(v["predictions"][attr.name()], p.level(attr));
        }
        assert!(v.get("summary").is_none());
    }

    #[test]
    fn unknown_template_is_fatal() {
        let r = BackendRequest::new("nope", "x".into(), SamplingSettings::EXTRACTION);
        assert!(!MockBackend::new(0).complete(&r).unwrap_err().retryable);
    }

    #[test]
    fn tag_depends_on_configuration() {
        let a = MockBackend::new(1).tag();
        let b = MockBackend::new(2).tag();
        let c = MockBackend::new(1)
            .with_bias(BiasTable::truth(1.0), BTreeMap::new())
            .tag();
        assert!(a != b && a != c);
    }
}
