//! User-week panel and dummy-coded design matrix.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ModelSpec;
use crate::audit::ExposureCell;
use crate::demographics::{Attribute, DemographicProfile, PREFER_NOT_TO_SAY};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelRow {
    pub user_id: String,
    pub week_index: u32,
    pub y: u64,
    pub exposure: u64,
    pub covariates: BTreeMap<Attribute, String>,
}

/// One row per cell; users who declined any modeled attribute are left out.
pub fn build_panel(
    cells: &[ExposureCell],
    profiles: &BTreeMap<String, DemographicProfile>,
    category: &str,
    attributes: &[Attribute],
    active_only: bool,
) -> Vec<PanelRow> {
    cells
        .iter()
        .filter(|c| c.total_ads > 0 && (!active_only || c.active))
        .filter_map(|c| {
            let p = profiles.get(&c.user_id)?;
            if attributes.iter().any(|&a| p.declined(a)) {
                return None;
            }
            Some(PanelRow {
                user_id: c.user_id.clone(),
                week_index: c.week_index,
                y: u64::from(c.count(category)),
                exposure: u64::from(c.total_ads),
                covariates: attributes
                    .iter()
                    .map(|&a| (a, p.level(a).to_string()))
                    .collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Column {
    Intercept,
    Main {
        attribute: Attribute,
        level: String,
        reference: String,
    },
    Interaction {
        a: Attribute,
        level_a: String,
        reference_a: String,
        b: Attribute,
        level_b: String,
        reference_b: String,
    },
}

impl Column {
    pub fn name(&self) -> String {
        match self {
            Column::Intercept => "(intercept)".into(),
            Column::Main {
                attribute, level, ..
            } => format!("{attribute}[{level}]"),
            Column::Interaction {
                a,
                level_a,
                b,
                level_b,
                ..
            } => format!("{a}[{level_a}]:{b}[{level_b}]"),
        }
    }

    fn value(&self, row: &PanelRow) -> bool {
        let is = |attr: &Attribute, level: &str| row.covariates.get(attr).map(String::as_str) == Some(level);
        match self {
            Column::Intercept => true,
            Column::Main {
                attribute, level, ..
            } => is(attribute, level),
            Column::Interaction {
                a,
                level_a,
                b,
                level_b,
                ..
            } => is(a, level_a) && is(b, level_b),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Design<T> {
    pub x: Matrix<T>,
    pub columns: Vec<Column>,
    /// Columns that are identically zero in this panel.
    pub empty_columns: Vec<usize>,
}

/// Non-reference levels of an attribute in questionnaire order. The
/// non-answer never gets a column: its holders are excluded from the panel.
pub fn dummy_levels(attribute: Attribute, reference: &str) -> Vec<&'static str> {
    attribute
        .levels()
        .iter()
        .copied()
        .filter(|l| *l != reference && *l != PREFER_NOT_TO_SAY)
        .collect()
}

pub fn design_columns(spec: &ModelSpec) -> Vec<Column> {
    let mut cols = vec![Column::Intercept];
    for attr in Attribute::ALL {
        if !spec.attributes.contains(&attr) {
            continue;
        }
        let reference = spec.reference(attr);
        for level in dummy_levels(attr, reference) {
            cols.push(Column::Main {
                attribute: attr,
                level: level.into(),
                reference: reference.into(),
            });
        }
    }
    for &(a, b) in &spec.interactions {
        let (ra, rb) = (spec.reference(a), spec.reference(b));
        for la in dummy_levels(a, ra) {
            for lb in dummy_levels(b, rb) {
                cols.push(Column::Interaction {
                    a,
                    level_a: la.into(),
                    reference_a: ra.into(),
                    b,
                    level_b: lb.into(),
                    reference_b: rb.into(),
                });
            }
        }
    }
    cols
}

pub fn design_matrix<T: Scalar>(rows: &[PanelRow], spec: &ModelSpec) -> Design<T> {
    let columns = design_columns(spec);
    let mut x = Matrix::zeros(rows.len(), columns.len());
    let mut nonzero = vec![false; columns.len()];
    for (i, r) in rows.iter().enumerate() {
        for (j, c) in columns.iter().enumerate() {
            if c.value(r) {
                x[(i, j)] = T::one();
                nonzero[j] = true;
            }
        }
    }
    let empty_columns: Vec<usize> = (0..columns.len()).filter(|&j| !nonzero[j]).collect();
    for &j in &empty_columns {
        log::warn!("design column {} is all zero in this panel", columns[j].name());
    }
    Design {
        x,
        columns,
        empty_columns,
    }
}

pub fn response<T: Scalar>(rows: &[PanelRow]) -> Vec<T> {
    rows.iter().map(|r| T::from_u64(r.y).expect("count fits")).collect()
}

pub fn log_exposure<T: Scalar>(rows: &[PanelRow]) -> Vec<T> {
    rows.iter()
        .map(|r| T::from_u64(r.exposure).expect("exposure fits").ln())
        .collect()
}
