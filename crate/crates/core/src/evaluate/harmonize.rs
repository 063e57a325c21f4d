//! Category harmonization and census priors.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::demographics::{Attribute, IncomeBracket, PREFER_NOT_TO_SAY};
use crate::error::{Error, Result};

pub const NO_DEGREE: &str = "No Degree";
pub const UNEMPLOYED: &str = "Unemployed";

/// Which category universe an evaluation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slice {
    /// The questionnaire's own categories.
    Full,
    /// Categories merged to match the census prior.
    Census,
}

impl Slice {
    pub fn name(self) -> &'static str {
        match self {
            Slice::Full => "full",
            Slice::Census => "census",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarmonizationRules {
    pub education_merge: BTreeMap<String, String>,
    pub employment_merge: BTreeMap<String, String>,
    /// Weekly census income times this factor gives annual income.
    pub income_annualization: u32,
    /// Levels dropped from the census slice, per attribute.
    pub census_exclusions: BTreeMap<Attribute, Vec<String>>,
    /// Levels dropped from every slice, per attribute.
    pub exclusions: BTreeMap<Attribute, Vec<String>>,
}

impl Default for HarmonizationRules {
    fn default() -> Self {
        let map = |pairs: &[(&str, &str)]| {
            pairs
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect()
        };
        let mut census_exclusions = BTreeMap::new();
        census_exclusions.insert(Attribute::Employment, vec!["Retired".to_string()]);
        let mut exclusions = BTreeMap::new();
        exclusions.insert(Attribute::Gender, vec!["Other".to_string()]);
        HarmonizationRules {
            education_merge: map(&[
                ("Postgraduate degree level", "Postgraduate degree level"),
                ("Bachelor degree level", "Bachelor degree level"),
                ("Year 12 or equivalent", NO_DEGREE),
                ("Less than year 12 or equivalent", NO_DEGREE),
            ]),
            employment_merge: map(&[
                ("Employed full time", "Employed full time"),
                ("Employed part time", "Employed part time"),
                ("Unemployed and looking for work", UNEMPLOYED),
                ("Unemployed and not looking for work", UNEMPLOYED),
                ("Retired", "Retired"),
            ]),
            income_annualization: 52,
            census_exclusions,
            exclusions,
        }
    }
}

impl HarmonizationRules {
    pub fn validate(&self) -> Result<()> {
        for (attr, map) in [
            (Attribute::Education, &self.education_merge),
            (Attribute::Employment, &self.employment_merge),
        ] {
            for level in attr.levels() {
                if *level != PREFER_NOT_TO_SAY && !map.contains_key(*level) {
                    return Err(Error::Evaluation(format!(
                        "{attr} merge map has no entry for {level:?}"
                    )));
                }
            }
        }
        if self.income_annualization == 0 {
            return Err(Error::Evaluation("income annualization factor is zero".into()));
        }
        Ok(())
    }

    fn excluded(&self, attribute: Attribute, level: &str, slice: Slice) -> bool {
        let hit = |m: &BTreeMap<Attribute, Vec<String>>| {
            m.get(&attribute).is_some_and(|v| v.iter().any(|l| l == level))
        };
        level == PREFER_NOT_TO_SAY || hit(&self.exclusions) || (slice == Slice::Census && hit(&self.census_exclusions))
    }

    /// Maps a ground-truth level into the slice, or `None` when excluded.
    pub fn harmonize(&self, attribute: Attribute, level: &str, slice: Slice) -> Option<String> {
        if self.excluded(attribute, level, slice) {
            return None;
        }
        let mapped = match (slice, attribute) {
            (Slice::Census, Attribute::Education) => self.education_merge.get(level).cloned(),
            (Slice::Census, Attribute::Employment) => self.employment_merge.get(level).cloned(),
            _ => None,
        }
        .unwrap_or_else(|| level.to_string());
        // A merge target can itself be excluded.
        if self.excluded(attribute, &mapped, slice) {
            None
        } else {
            Some(mapped)
        }
    }

    /// Maps a prediction into the slice. Literals outside it (including the
    /// abstention marker) pass through unchanged and can never match.
    pub fn harmonize_prediction(&self, attribute: Attribute, label: &str, slice: Slice) -> String {
        self.harmonize(attribute, label, slice)
            .unwrap_or_else(|| label.to_string())
    }

    /// Category universe of the slice, in questionnaire order.
    pub fn categories(&self, attribute: Attribute, slice: Slice) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for level in attribute.levels() {
            if let Some(h) = self.harmonize(attribute, level, slice) {
                if !out.contains(&h) {
                    out.push(h);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusPrior {
    pub provenance: String,
    pub probabilities: BTreeMap<Attribute, BTreeMap<String, f64>>,
}

#[derive(Debug, Deserialize)]
struct PriorRecord {
    attribute: String,
    category: String,
    probability: f64,
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    attribute: String,
    category: String,
    value: f64,
}

fn provenance_line(text: &str) -> String {
    text.lines()
        .find_map(|l| l.trim().strip_prefix("# provenance:"))
        .map(|s| s.trim().to_string())
        .unwrap_or_default()
}

fn csv_body(text: &str) -> String {
    text.lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Census categories not present in the survey: nil or unstated income and
/// the under-18 population.
const RAW_EXCLUDED: [&str; 3] = ["Negative/Nil income", "Not stated", "Under 18"];

/// Dollar lower bound of a weekly bracket label such as `$300-$399 per week`.
fn weekly_lower_bound(label: &str) -> Option<u32> {
    let digits: String = label
        .trim_start_matches('$')
        .chars()
        .take_while(|c| c.is_ascii_digit() || *c == ',')
        .filter(char::is_ascii_digit)
        .collect();
    digits.parse().ok()
}

impl CensusPrior {
    pub const BUNDLED_RAW: &'static str = include_str!("../../assets/census_raw.csv");

    pub fn bundled(rules: &HarmonizationRules) -> Result<Self> {
        Self::from_raw(Self::BUNDLED_RAW, rules)
    }

    /// Builds the prior from raw counts (or percentages): weekly income
    /// brackets are annualized and matched one-to-one to the survey
    /// brackets, the other labels are resolved through the harmonization
    /// rules, and each attribute is renormalized.
    pub fn from_raw(text: &str, rules: &HarmonizationRules) -> Result<Self> {
        rules.validate()?;
        let provenance = provenance_line(text);
        let body = csv_body(text);
        let mut reader = csv::Reader::from_reader(body.as_bytes());
        let mut sums: BTreeMap<Attribute, BTreeMap<String, f64>> = BTreeMap::new();
        let mut matched_income = std::collections::BTreeSet::new();
        for rec in reader.deserialize() {
            let rec: RawRecord = rec?;
            let attr: Attribute = rec.attribute.parse()?;
            if RAW_EXCLUDED.contains(&rec.category.as_str()) {
                continue;
            }
            let cat = if attr == Attribute::Income {
                let weekly = weekly_lower_bound(&rec.category)
                    .ok_or_else(|| Error::Prior(format!("unparseable income bracket {:?}", rec.category)))?;
                let lb = weekly * rules.income_annualization;
                // Both scales start their lowest bracket at $1.
                let cat = IncomeBracket::ALL
                    .iter()
                    .find(|b| b.annual_lower_bound() == Some(lb) || (weekly == 1 && b.index() == 0))
                    .map(|b| b.literal().to_string())
                    .ok_or_else(|| {
                        Error::Prior(format!(
                            "income bracket {:?} (annual lower bound {lb}) matches no survey bracket",
                            rec.category
                        ))
                    })?;
                if !matched_income.insert(cat.clone()) {
                    return Err(Error::Prior(format!("two census income brackets map to {cat:?}")));
                }
                cat
            } else {
                resolve_census_label(attr, &rec.category, rules)?
            };
            *sums.entry(attr).or_default().entry(cat).or_default() += rec.value;
        }
        let probabilities = sums
            .into_iter()
            .map(|(a, m)| {
                let total: f64 = m.values().sum();
                (a, m.into_iter().map(|(k, v)| (k, v / total)).collect())
            })
            .collect();
        let prior = CensusPrior {
            provenance,
            probabilities,
        };
        prior.validate(rules)?;
        Ok(prior)
    }

    /// Reads `attribute,category,probability` rows.
    pub fn from_csv(text: &str, rules: &HarmonizationRules) -> Result<Self> {
        let provenance = provenance_line(text);
        let body = csv_body(text);
        let mut reader = csv::Reader::from_reader(body.as_bytes());
        let mut probabilities: BTreeMap<Attribute, BTreeMap<String, f64>> = BTreeMap::new();
        for rec in reader.deserialize() {
            let rec: PriorRecord = rec?;
            let attr: Attribute = rec.attribute.parse()?;
            probabilities
                .entry(attr)
                .or_default()
                .insert(rec.category, rec.probability);
        }
        let prior = CensusPrior {
            provenance,
            probabilities,
        };
        prior.validate(rules)?;
        Ok(prior)
    }

    pub fn load(path: &Path, rules: &HarmonizationRules) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, rules)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# provenance: {}\nattribute,category,probability\n", self.provenance);
        for (a, m) in &self.probabilities {
            for (c, p) in m {
                let c = if c.contains(',') { format!("\"{c}\"") } else { c.clone() };
                out.push_str(&format!("{},{},{}\n", a.name(), c, p));
            }
        }
        out
    }

    pub fn validate(&self, rules: &HarmonizationRules) -> Result<()> {
        for (attr, m) in &self.probabilities {
            let total: f64 = m.values().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Prior(format!("{attr} probabilities sum to {total}")));
            }
            if m.values().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Prior(format!("{attr} has a probability outside [0, 1]")));
            }
            let expected = rules.categories(*attr, Slice::Census);
            let mut got: Vec<&String> = m.keys().collect();
            let mut want: Vec<&String> = expected.iter().collect();
            got.sort();
            want.sort();
            if got != want {
                return Err(Error::Prior(format!(
                    "{attr} categories {got:?} do not match the harmonized set {want:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, attribute: Attribute) -> Result<&BTreeMap<String, f64>> {
        self.probabilities
            .get(&attribute)
            .ok_or_else(|| Error::Prior(format!("no prior for {attribute}")))
    }
}

/// Matches a census label to a harmonized category: verbatim survey
/// literal first, then the label with ` level` appended, then the merge
/// targets, all case-insensitively.
fn resolve_census_label(attr: Attribute, raw: &str, rules: &HarmonizationRules) -> Result<String> {
    let cats = rules.categories(attr, Slice::Census);
    if let Some(level) = attr.parse_level(raw) {
        if let Some(h) = rules.harmonize(attr, level, Slice::Census) {
            return Ok(h);
        }
    }
    let lower = raw.trim().to_lowercase();
    cats.iter()
        .find(|c| {
            let c = c.to_lowercase();
            c == lower || c == format!("{lower} level")
        })
        .cloned()
        .ok_or_else(|| Error::Prior(format!("census {attr} category {raw:?} has no harmonized match")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merges_and_exclusions() {
        let r = HarmonizationRules::default();
        assert_eq!(
            r.harmonize(Attribute::Education, "Year 12 or equivalent", Slice::Census).as_deref(),
            Some(NO_DEGREE)
        );
        assert_eq!(r.harmonize(Attribute::Employment, "Retired", Slice::Census), None);
        assert_eq!(
            r.harmonize(Attribute::Employment, "Retired", Slice::Full).as_deref(),
            Some("Retired")
        );
        assert_eq!(
            r.harmonize(Attribute::Employment, "Unemployed and looking for work", Slice::Census).as_deref(),
            Some(UNEMPLOYED)
        );
        assert_eq!(r.harmonize(Attribute::Gender, "Female", Slice::Census).as_deref(), Some("Female"));
        assert_eq!(r.harmonize(Attribute::Gender, "Other", Slice::Full), None);
        assert_eq!(r.harmonize(Attribute::Age, PREFER_NOT_TO_SAY, Slice::Full), None);
    }

    #[test]
    fn idempotent() {
        let r = HarmonizationRules::default();
        for slice in [Slice::Full, Slice::Census] {
            for attr in Attribute::ALL {
                for level in attr.levels() {
                    if let Some(h) = r.harmonize(attr, level, slice) {
                        assert_eq!(r.harmonize(attr, &h, slice).as_deref(), Some(h.as_str()));
                    }
                }
            }
        }
    }

    #[test]
    fn bundled_prior() {
        let r = HarmonizationRules::default();
        let p = CensusPrior::bundled(&r).unwrap();
        let g = p.get(Attribute::Gender).unwrap();
        assert!((g["Female"] - 12_877_635.0 / 25_422_789.0).abs() < 1e-12);
        let inc = p.get(Attribute::Income).unwrap();
        assert_eq!(inc.len(), 12);
        assert!(inc.contains_key("$1-$15,599") && inc.contains_key("$156,000 or more"));
        assert_eq!(p.get(Attribute::Education).unwrap().len(), 3);
        assert!(p.get(Attribute::Party).unwrap().contains_key("Liberal (National Coalition)"));
        let round = CensusPrior::from_csv(&p.to_csv(), &r).unwrap();
        assert_eq!(round, p);
    }

    #[test]
    fn unmatched_income_bracket_is_an_error() {
        let r = HarmonizationRules::default();
        let raw = "attribute,category,value\nincome,$310-$399 per week,5\n";
        assert!(matches!(CensusPrior::from_raw(raw, &r), Err(Error::Prior(_))));
    }
}
