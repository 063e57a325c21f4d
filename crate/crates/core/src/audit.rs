//! Descriptive exposure metrics over weekly windows.
//!
//! The unit of analysis is the active user-week: a (user, 7-day window) pair
//! with at least three impressions of any category. Coverage is the share of
//! active user-weeks in a demographic level with at least one ad of the
//! target category; average intensity is the mean target-category count over
//! the same user-weeks.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demographics::{Attribute, DemographicProfile};
use crate::error::{Error, Result};
use crate::features::AdFeatures;
use crate::ingest::CohortDataset;

pub const WEEK_SECONDS: i64 = 7 * 86_400;
pub const ACTIVE_MIN_ADS: u32 = 3;

pub const DEFAULT_TARGETS: [&str; 4] = ["Gambling", "Politics", "Alcohol", "Education and Careers"];

pub fn window_index(timestamp: i64, epoch: i64) -> Result<u32> {
    if timestamp < epoch {
        return Err(Error::BeforeEpoch { timestamp, epoch });
    }
    let w = (timestamp - epoch) / WEEK_SECONDS;
    u32::try_from(w).map_err(|_| Error::Numerical(format!("week index {w} out of range")))
}

/// Midnight UTC of the earliest impression.
pub fn dataset_epoch(cohort: &CohortDataset) -> Option<i64> {
    cohort
        .impressions
        .iter()
        .map(|i| i.timestamp)
        .min()
        .map(|t| t - t.rem_euclid(86_400))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExposureCell {
    pub user_id: String,
    pub week_index: u32,
    pub total_ads: u32,
    pub category_counts: BTreeMap<String, u32>,
    pub active: bool,
}

impl ExposureCell {
    pub fn count(&self, category: &str) -> u32 {
        self.category_counts.get(category).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Default)]
pub struct CellBuild {
    pub cells: Vec<ExposureCell>,
    /// Impressions without features: counted in `total_ads` only.
    pub missing_features: usize,
}

/// One cell per (user, week) with at least one impression, ordered by user
/// then week. An ad adds one to each of its IAB categories.
pub fn build_cells(
    cohort: &CohortDataset,
    features: &BTreeMap<String, AdFeatures>,
    epoch: i64,
) -> Result<CellBuild> {
    let per_user: Vec<(Vec<ExposureCell>, usize)> = cohort
        .by_user()
        .par_iter()
        .map(|(user, imps)| {
            let mut weeks: BTreeMap<u32, ExposureCell> = BTreeMap::new();
            let mut missing = 0;
            for imp in imps.iter() {
                let w = window_index(imp.timestamp, epoch)?;
                let cell = weeks.entry(w).or_insert_with(|| ExposureCell {
                    user_id: user.to_string(),
                    week_index: w,
                    total_ads: 0,
                    category_counts: BTreeMap::new(),
                    active: false,
                });
                cell.total_ads += 1;
                match features.get(&imp.ad_id) {
                    Some(f) => {
                        for c in &f.iab_categories {
                            *cell.category_counts.entry(c.clone()).or_insert(0) += 1;
                        }
                    }
                    None => missing += 1,
                }
            }
            let cells = weeks
                .into_values()
                .map(|mut c| {
                    c.active = c.total_ads >= ACTIVE_MIN_ADS;
                    c
                })
                .collect();
            Ok((cells, missing))
        })
        .collect::<Result<_>>()?;
    let mut out = CellBuild::default();
    for (cells, missing) in per_user {
        out.cells.extend(cells);
        out.missing_features += missing;
    }
    if out.missing_features > 0 {
        log::warn!(
            "{} impression(s) have no features and count toward totals only",
            out.missing_features
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureSummary {
    pub attribute: Attribute,
    pub level: String,
    pub category: String,
    /// `None` when the level has no active user-weeks.
    pub coverage: Option<f64>,
    pub avg_intensity: Option<f64>,
    pub n_active_user_weeks: usize,
    /// False for the non-answer level, which is reported but kept out of
    /// cross-level comparisons.
    pub in_comparison: bool,
}

impl ExposureSummary {
    pub fn is_empty(&self) -> bool {
        self.n_active_user_weeks == 0
    }
}

pub fn coverage(
    cells: &[ExposureCell],
    attribute: Attribute,
    level: &str,
    category: &str,
    profiles: &BTreeMap<String, DemographicProfile>,
) -> Result<ExposureSummary> {
    let level = attribute.parse_level(level).ok_or_else(|| Error::UnknownLevel {
        attribute: attribute.name().into(),
        level: level.into(),
    })?;
    let mut n = 0usize;
    let mut covered = 0usize;
    let mut total = 0u64;
    for c in cells.iter().filter(|c| c.active) {
        let Some(p) = profiles.get(&c.user_id) else {
            continue;
        };
        if p.level(attribute) != level {
            continue;
        }
        n += 1;
        let k = c.count(category);
        total += u64::from(k);
        if k > 0 {
            covered += 1;
        }
    }
    let (coverage, avg_intensity) = if n == 0 {
        (None, None)
    } else {
        (
            Some(covered as f64 / n as f64),
            Some(total as f64 / n as f64),
        )
    };
    Ok(ExposureSummary {
        attribute,
        level: level.into(),
        category: category.into(),
        coverage,
        avg_intensity,
        n_active_user_weeks: n,
        in_comparison: level != crate::demographics::PREFER_NOT_TO_SAY,
    })
}

/// Every (attribute, level, category) summary in canonical order.
pub fn audit_report(
    cells: &[ExposureCell],
    profiles: &BTreeMap<String, DemographicProfile>,
    categories: &[String],
) -> Result<Vec<ExposureSummary>> {
    let mut out = Vec::new();
    for attr in Attribute::ALL {
        for level in attr.levels() {
            for cat in categories {
                out.push(coverage(cells, attr, level, cat, profiles)?);
            }
        }
    }
    Ok(out)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

pub fn write_report<W: std::io::Write>(writer: W, rows: &[ExposureSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "attribute",
        "level",
        "category",
        "coverage",
        "avg_intensity",
        "n_active_user_weeks",
        "in_comparison",
    ])?;
    for r in rows {
        w.write_record([
            r.attribute.name().to_string(),
            r.level.clone(),
            r.category.clone(),
            fmt_opt(r.coverage),
            fmt_opt(r.avg_intensity),
            r.n_active_user_weeks.to_string(),
            r.in_comparison.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<audit report>", e))?;
    Ok(())
}
