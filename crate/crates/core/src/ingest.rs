//! Impression-log and profile ingestion.
//!
//! Impressions come as JSONL (one object per line) or CSV with the headers
//! `user_id, timestamp, ad_id, source, title, body, image_refs`. Profiles are
//! CSV with `user_id, gender, age, income, education, employment, party`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::demographics::{
    AgeBracket, DemographicProfile, Education, Employment, Gender, IncomeBracket, Party,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdImpression {
    pub user_id: String,
    /// UTC seconds since the Unix epoch.
    pub timestamp: i64,
    pub ad_id: String,
    pub source: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub body: String,
    #[serde(default)]
    pub image_refs: Vec<String>,
}

impl AdImpression {
    /// Returns the impression with HTML removed from title and body.
    pub fn cleaned(mut self) -> Self {
        self.title = strip_html(&self.title);
        self.body = strip_html(&self.body);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Jsonl,
    Csv,
}

impl InputFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => InputFormat::Csv,
            _ => InputFormat::Jsonl,
        }
    }
}

/// Parses an impression file. Records are returned in file order; row
/// numbers in errors are 1-based data rows (the CSV header is not counted).
pub fn parse_impressions(path: &Path, format: InputFormat) -> Result<Vec<AdImpression>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    match format {
        InputFormat::Jsonl => parse_jsonl(BufReader::new(file), path),
        InputFormat::Csv => parse_csv(file),
    }
}

fn parse_jsonl<R: BufRead>(reader: R, path: &Path) -> Result<Vec<AdImpression>> {
    let mut out = Vec::new();
    let mut row = 0;
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        row += 1;
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::MalformedRow {
            row,
            message: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| Error::MalformedRow {
            row,
            message: "expected a JSON object".into(),
        })?;
        let field = |name: &str| -> Result<Option<String>> {
            match obj.get(name) {
                None | Some(Value::Null) => Ok(None),
                Some(Value::String(s)) => Ok(Some(s.clone())),
                Some(Value::Number(n)) => Ok(Some(n.to_string())),
                Some(other) => Err(Error::MalformedRow {
                    row,
                    message: format!("field `{name}` has unexpected type: {other}"),
                }),
            }
        };
        let image_refs = match obj.get("image_refs") {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    Value::String(s) => Ok(s.clone()),
                    other => Err(Error::MalformedRow {
                        row,
                        message: format!("image_refs entry is not a string: {other}"),
                    }),
                })
                .collect::<Result<_>>()?,
            Some(Value::String(s)) => split_refs(s),
            Some(other) => {
                return Err(Error::MalformedRow {
                    row,
                    message: format!("image_refs has unexpected type: {other}"),
                })
            }
        };
        out.push(build_impression(
            row,
            field("user_id")?,
            field("timestamp")?,
            field("ad_id")?,
            field("source")?,
            field("title")?,
            field("body")?,
            image_refs,
        )?);
    }
    Ok(out)
}

fn parse_csv<R: std::io::Read>(reader: R) -> Result<Vec<AdImpression>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (user, ts, ad, source, title, body, images) = (
        col("user_id"),
        col("timestamp"),
        col("ad_id"),
        col("source"),
        col("title"),
        col("body"),
        col("image_refs"),
    );
    let mut out = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::MalformedRow {
            row,
            message: e.to_string(),
        })?;
        let get = |idx: Option<usize>| idx.and_then(|i| record.get(i)).map(str::to_string);
        let image_refs = get(images).map(|s| split_refs(&s)).unwrap_or_default();
        out.push(build_impression(
            row,
            get(user),
            get(ts),
            get(ad),
            get(source),
            get(title),
            get(body),
            image_refs,
        )?);
    }
    Ok(out)
}

/// Image refs in a single text cell: a JSON array, or `;`-separated paths.
fn split_refs(s: &str) -> Vec<String> {
    let t = s.trim();
    if t.starts_with('[') {
        if let Ok(v) = serde_json::from_str::<Vec<String>>(t) {
            return v;
        }
    }
    t.split(';')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(str::to_string)
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn build_impression(
    row: usize,
    user_id: Option<String>,
    timestamp: Option<String>,
    ad_id: Option<String>,
    source: Option<String>,
    title: Option<String>,
    body: Option<String>,
    image_refs: Vec<String>,
) -> Result<AdImpression> {
    let required = |v: Option<String>, name: &str| -> Result<String> {
        match v {
            Some(s) if !s.trim().is_empty() => Ok(s.trim().to_string()),
            _ => Err(Error::MissingField {
                row,
                field: name.to_string(),
            }),
        }
    };
    let user_id = required(user_id, "user_id")?;
    let raw_ts = required(timestamp, "timestamp")?;
    let source = required(source, "source")?;
    let timestamp = parse_timestamp(&raw_ts).ok_or_else(|| Error::MalformedRow {
        row,
        message: format!("unparseable or negative timestamp {raw_ts:?}"),
    })?;
    let title = title.unwrap_or_default();
    let body = body.unwrap_or_default();
    let ad_id = match ad_id {
        Some(id) if !id.trim().is_empty() => id.trim().to_string(),
        _ => content_ad_id(&title, &body, &image_refs),
    };
    Ok(AdImpression {
        user_id,
        timestamp,
        ad_id,
        source,
        title,
        body,
        image_refs,
    })
}

/// Stable identifier for rows that carry no `ad_id`.
fn content_ad_id(title: &str, body: &str, image_refs: &[String]) -> String {
    let mut h = Sha256::new();
    h.update(title.as_bytes());
    h.update([0]);
    h.update(body.as_bytes());
    for r in image_refs {
        h.update([0]);
        h.update(r.as_bytes());
    }
    format!("ad-{}", &hex::encode(h.finalize())[..16])
}

/// Accepts integer or fractional epoch seconds, RFC 3339, or
/// `YYYY-MM-DD HH:MM:SS` (taken as UTC). Sub-second parts are truncated.
pub fn parse_timestamp(raw: &str) -> Option<i64> {
    let s = raw.trim();
    let secs = if let Ok(n) = s.parse::<i64>() {
        n
    } else if let Ok(f) = s.parse::<f64>() {
        if !f.is_finite() {
            return None;
        }
        f.trunc() as i64
    } else if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        dt.timestamp()
    } else if let Ok(ndt) = NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S") {
        ndt.and_utc().timestamp()
    } else {
        return None;
    };
    (secs >= 0).then_some(secs)
}

/// Removes tag markup, decodes character entities and collapses whitespace.
/// The scan repeats until nothing changes, so the result is a fixed point and
/// the function is idempotent.
pub fn strip_html(text: &str) -> String {
    let mut current = collapse_whitespace(text);
    loop {
        let next = collapse_whitespace(&remove_tags(&decode_entities(&current)));
        if next == current {
            return next;
        }
        current = next;
    }
}

fn is_tag_start(c: char) -> bool {
    c.is_ascii_alphabetic() || matches!(c, '/' | '!' | '?')
}

fn remove_tags(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len());
    let mut i = 0;
    while i < chars.len() {
        if chars[i] == '<' && i + 1 < chars.len() && is_tag_start(chars[i + 1]) {
            // Comments may contain '>' and '<'.
            if chars[i + 1..].starts_with(&['!', '-', '-']) {
                let rest: String = chars[i + 4..].iter().collect();
                if let Some(end) = rest.find("-->") {
                    i += 4 + rest[..end].chars().count() + 3;
                    out.push(' ');
                    continue;
                }
            }
            if let Some(len) = chars[i + 1..]
                .iter()
                .position(|&c| c == '>' || c == '<')
                .filter(|&p| chars[i + 1 + p] == '>')
            {
                i += len + 2;
                out.push(' ');
                continue;
            }
        }
        out.push(chars[i]);
        i += 1;
    }
    out
}

fn decode_entities(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(amp) = rest.find('&') {
        out.push_str(&rest[..amp]);
        let tail = &rest[amp..];
        match tail[1..].find(';').filter(|&p| p <= 10) {
            Some(p) => {
                let name = &tail[1..1 + p];
                if let Some(c) = entity_char(name) {
                    out.push(c);
                    rest = &tail[p + 2..];
                } else {
                    out.push('&');
                    rest = &tail[1..];
                }
            }
            None => {
                out.push('&');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

fn entity_char(name: &str) -> Option<char> {
    if let Some(num) = name.strip_prefix('#') {
        let code = match num.strip_prefix(['x', 'X']) {
            Some(hex) => u32::from_str_radix(hex, 16).ok()?,
            None => num.parse::<u32>().ok()?,
        };
        return char::from_u32(code);
    }
    Some(match name {
        "amp" => '&',
        "lt" => '<',
        "gt" => '>',
        "quot" => '"',
        "apos" => '\'',
        "nbsp" => ' ',
        "ndash" => '–',
        "mdash" => '—',
        "hellip" => '…',
        "lsquo" => '‘',
        "rsquo" => '’',
        "ldquo" => '“',
        "rdquo" => '”',
        "copy" => '©',
        "reg" => '®',
        "trade" => '™',
        "euro" => '€',
        "pound" => '£',
        _ => return None,
    })
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Keeps impressions whose source equals `keep`, ignoring ASCII case and
/// surrounding whitespace. Order is preserved.
pub fn filter_source(impressions: Vec<AdImpression>, keep: &str) -> Vec<AdImpression> {
    let keep = keep.trim();
    impressions
        .into_iter()
        .filter(|imp| imp.source.trim().eq_ignore_ascii_case(keep))
        .collect()
}

pub fn load_profiles(path: &Path) -> Result<BTreeMap<String, DemographicProfile>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_profiles(file)
}

pub fn read_profiles<R: std::io::Read>(reader: R) -> Result<BTreeMap<String, DemographicProfile>> {
    const FIELDS: [&str; 7] = [
        "user_id",
        "gender",
        "age",
        "income",
        "education",
        "employment",
        "party",
    ];
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut idx = [0usize; 7];
    for (slot, name) in idx.iter_mut().zip(FIELDS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingField {
                row: 1,
                field: name.to_string(),
            })?;
    }
    let mut out = BTreeMap::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::MalformedRow {
            row,
            message: e.to_string(),
        })?;
        let cell = |k: usize| record.get(idx[k]).unwrap_or("");
        fn parse<T>(row: usize, field: &str, raw: &str, f: fn(&str) -> Option<T>) -> Result<T> {
            f(raw).ok_or_else(|| Error::UnknownCategory {
                row,
                field: field.to_string(),
                value: raw.to_string(),
            })
        }
        let user_id = cell(0).trim().to_string();
        if user_id.is_empty() {
            return Err(Error::MissingField {
                row,
                field: "user_id".into(),
            });
        }
        let profile = DemographicProfile {
            user_id: user_id.clone(),
            gender: parse(row, "gender", cell(1), Gender::from_literal)?,
            age_bracket: parse(row, "age", cell(2), AgeBracket::from_literal)?,
            income_bracket: parse(row, "income", cell(3), IncomeBracket::from_literal)?,
            education: parse(row, "education", cell(4), Education::from_literal)?,
            employment: parse(row, "employment", cell(5), Employment::from_literal)?,
            party: parse(row, "party", cell(6), Party::from_literal)?,
        };
        if out.insert(user_id.clone(), profile).is_some() {
            return Err(Error::DuplicateUser { row, user_id });
        }
    }
    Ok(out)
}

pub fn write_profiles<W: std::io::Write>(
    writer: W,
    profiles: &BTreeMap<String, DemographicProfile>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "user_id",
        "gender",
        "age",
        "income",
        "education",
        "employment",
        "party",
    ])?;
    for p in profiles.values() {
        w.write_record([
            p.user_id.as_str(),
            p.gender.literal(),
            p.age_bracket.literal(),
            p.income_bracket.literal(),
            p.education.literal(),
            p.employment.literal(),
            p.party.literal(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<profiles>", e))?;
    Ok(())
}

/// Impressions joined to profiles, grouped by user and time-ordered.
#[derive(Debug, Clone, Default)]
pub struct CohortDataset {
    /// Sorted by `(user_id, timestamp)`; ties keep file order.
    pub impressions: Vec<AdImpression>,
    pub profiles: BTreeMap<String, DemographicProfile>,
}

impl CohortDataset {
    /// Builds the dataset, dropping impressions whose user has no profile.
    /// Returns the dataset and the number of dropped impressions.
    pub fn new(
        mut impressions: Vec<AdImpression>,
        profiles: BTreeMap<String, DemographicProfile>,
    ) -> (Self, usize) {
        let before = impressions.len();
        impressions.retain(|imp| profiles.contains_key(&imp.user_id));
        let dropped = before - impressions.len();
        impressions.sort_by(|a, b| {
            a.user_id
                .cmp(&b.user_id)
                .then(a.timestamp.cmp(&b.timestamp))
        });
        (
            CohortDataset {
                impressions,
                profiles,
            },
            dropped,
        )
    }

    /// Per-user slices in user-id order.
    pub fn by_user(&self) -> Vec<(&str, &[AdImpression])> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.impressions.len() {
            if i == self.impressions.len()
                || self.impressions[i].user_id != self.impressions[start].user_id
            {
                out.push((self.impressions[start].user_id.as_str(), &self.impressions[start..i]));
                start = i;
            }
        }
        out
    }

    pub fn user_count(&self) -> usize {
        self.impressions
            .iter()
            .map(|i| i.user_id.as_str())
            .collect::<HashSet<_>>()
            .len()
    }
}
