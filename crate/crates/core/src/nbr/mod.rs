//! Negative-binomial (NB2) regression of per-category ad counts on
//! demographics, with log total exposure as offset and user-clustered
//! robust inference.

pub mod fit;
pub mod irr;
pub mod panel;
pub mod robust;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::audit::{ExposureCell, DEFAULT_TARGETS};
use crate::demographics::{Attribute, DemographicProfile, PREFER_NOT_TO_SAY};
use crate::error::{Error, Result};
use crate::linalg::{independent_columns, Matrix};
use crate::scalar::Scalar;

pub use fit::{fit_nb2, FitFlags, FitOptions, FitResult};
pub use irr::{implied_irr, irr_table, write_irr_csv, IrrRow};
pub use panel::{build_panel, design_matrix, Column, PanelRow};
pub use robust::{cluster_robust_cov, standard_errors};

/// Relative pivot tolerance below which a design column counts as aliased.
const ALIAS_TOL: f64 = 1e-10;

pub fn default_reference(attribute: Attribute) -> &'static str {
    match attribute {
        Attribute::Gender => "Female",
        Attribute::Age => "25-34",
        Attribute::Income => "$156,000 or more",
        Attribute::Education => "Bachelor degree level",
        Attribute::Employment => "Employed full time",
        Attribute::Party => "None",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub attributes: Vec<Attribute>,
    /// Overrides of the default reference level.
    #[serde(default)]
    pub references: BTreeMap<Attribute, String>,
    #[serde(default)]
    pub interactions: Vec<(Attribute, Attribute)>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            attributes: Attribute::ALL.to_vec(),
            references: BTreeMap::new(),
            interactions: Vec::new(),
        }
    }
}

impl ModelSpec {
    pub fn with_interactions(mut self, pairs: Vec<(Attribute, Attribute)>) -> Self {
        self.interactions = pairs;
        self
    }

    pub fn reference(&self, attribute: Attribute) -> &str {
        self.references
            .get(&attribute)
            .map(String::as_str)
            .unwrap_or_else(|| default_reference(attribute))
    }

    pub fn validate(&self) -> Result<()> {
        if self.attributes.is_empty() {
            return Err(Error::InvalidSpec("no attributes to model".into()));
        }
        for (attr, level) in &self.references {
            match attr.parse_level(level) {
                Some(l) if l != PREFER_NOT_TO_SAY => {}
                _ => {
                    return Err(Error::UnknownLevel {
                        attribute: attr.to_string(),
                        level: level.clone(),
                    })
                }
            }
        }
        for &(a, b) in &self.interactions {
            if a == b || !self.attributes.contains(&a) || !self.attributes.contains(&b) {
                return Err(Error::InvalidSpec(format!(
                    "interaction {a}:{b} needs two distinct modeled attributes"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NbrConfig {
    pub categories: Vec<String>,
    pub attributes: Vec<Attribute>,
    pub references: BTreeMap<Attribute, String>,
    /// Pairs eligible for the interaction model.
    pub interaction_candidates: Vec<(Attribute, Attribute)>,
    /// Both parents need some main-effect p-value below this.
    pub screening_threshold: f64,
    pub significance: f64,
    /// Restrict the panel to active user-weeks.
    pub active_only: bool,
    pub fit: FitOptions,
}

impl Default for NbrConfig {
    fn default() -> Self {
        NbrConfig {
            categories: DEFAULT_TARGETS.iter().map(|s| s.to_string()).collect(),
            attributes: Attribute::ALL.to_vec(),
            references: BTreeMap::new(),
            interaction_candidates: vec![(Attribute::Gender, Attribute::Income)],
            screening_threshold: 0.10,
            significance: 0.05,
            active_only: false,
            fit: FitOptions::default(),
        }
    }
}

impl NbrConfig {
    pub fn main_spec(&self) -> ModelSpec {
        ModelSpec {
            attributes: self.attributes.clone(),
            references: self.references.clone(),
            interactions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedColumn {
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFit<T> {
    pub spec: ModelSpec,
    pub columns: Vec<String>,
    pub dropped: Vec<DroppedColumn>,
    pub n_rows: usize,
    pub fit: FitResult<T>,
    pub irr: Vec<IrrRow>,
}

/// Builds the design, drops empty and aliased columns, fits NB2 and attaches
/// user-clustered standard errors.
pub fn fit_model<T: Scalar>(
    rows: &[PanelRow],
    spec: &ModelSpec,
    opts: &FitOptions,
    significance: f64,
) -> Result<ModelFit<T>> {
    spec.validate()?;
    if rows.is_empty() {
        return Err(Error::InvalidSpec("empty panel".into()));
    }
    let design = design_matrix::<T>(rows, spec);
    let y = panel::response::<T>(rows);
    let offset = panel::log_exposure::<T>(rows);
    let gram = design.x.transpose().matmul(&design.x);
    let keep = independent_columns(&gram, T::lit(ALIAS_TOL));
    let dropped: Vec<DroppedColumn> = (0..design.columns.len())
        .filter(|j| !keep.contains(j))
        .map(|j| {
            let name = design.columns[j].name();
            let reason = if design.empty_columns.contains(&j) {
                "empty"
            } else {
                log::warn!("design column {name} is aliased and was dropped");
                "aliased"
            };
            DroppedColumn {
                name,
                reason: reason.into(),
            }
        })
        .collect();
    let x: Matrix<T> = design.x.select_columns(&keep);
    let columns: Vec<Column> = keep.iter().map(|&j| design.columns[j].clone()).collect();

    let mut fit = fit_nb2(&x, &y, &offset, opts)?;
    let irr = if fit.flags.non_estimable {
        Vec::new()
    } else {
        let clusters: Vec<&str> = rows.iter().map(|r| r.user_id.as_str()).collect();
        let cov = cluster_robust_cov(&fit, &x, &y, &offset, &clusters)?;
        let se = standard_errors(&cov);
        fit.n_clusters = Some(clusters.iter().collect::<std::collections::BTreeSet<_>>().len());
        fit.cov_cluster = Some(cov);
        irr_table(&columns, &fit.beta, &se, significance)
    };
    Ok(ModelFit {
        spec: spec.clone(),
        columns: columns.iter().map(Column::name).collect(),
        dropped,
        n_rows: rows.len(),
        fit,
        irr,
    })
}

/// Candidate pairs whose parents both have a main-effect p-value below the
/// threshold.
pub fn screen_interactions(
    main: &[IrrRow],
    candidates: &[(Attribute, Attribute)],
    threshold: f64,
) -> Vec<(Attribute, Attribute)> {
    let min_p = |attr: Attribute| {
        main.iter()
            .filter(|r| r.attribute == attr.name())
            .map(|r| r.p)
            .filter(|p| !p.is_nan())
            .fold(f64::INFINITY, f64::min)
    };
    candidates
        .iter()
        .copied()
        .filter(|&(a, b)| min_p(a) < threshold && min_p(b) < threshold)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryFits {
    pub category: String,
    pub main: ModelFit<f64>,
    pub screened: Vec<(Attribute, Attribute)>,
    pub interaction: Option<ModelFit<f64>>,
}

impl CategoryFits {
    /// Interaction-term rows of the interaction model.
    pub fn interaction_rows(&self) -> Vec<IrrRow> {
        self.interaction
            .iter()
            .flat_map(|m| m.irr.iter())
            .filter(|r| r.attribute.contains(':'))
            .cloned()
            .collect()
    }
}

pub fn run_category(
    cells: &[ExposureCell],
    profiles: &BTreeMap<String, DemographicProfile>,
    category: &str,
    config: &NbrConfig,
) -> Result<CategoryFits> {
    let rows = build_panel(cells, profiles, category, &config.attributes, config.active_only);
    let spec = config.main_spec();
    let main = fit_model::<f64>(&rows, &spec, &config.fit, config.significance)?;
    let screened = screen_interactions(
        &main.irr,
        &config.interaction_candidates,
        config.screening_threshold,
    );
    let interaction = if screened.is_empty() {
        None
    } else {
        let spec = spec.with_interactions(screened.clone());
        Some(fit_model::<f64>(&rows, &spec, &config.fit, config.significance)?)
    };
    Ok(CategoryFits {
        category: category.to_string(),
        main,
        screened,
        interaction,
    })
}

/// File-name form of a category label.
pub fn slug(category: &str) -> String {
    let mut out = String::new();
    for c in category.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_matches('_').to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(p: f64, attribute: &str) -> IrrRow {
        IrrRow {
            attribute: attribute.into(),
            target: "t".into(),
            reference: "r".into(),
            beta: 0.0,
            se: 1.0,
            irr: 1.0,
            ci_low: 0.5,
            ci_high: 2.0,
            p,
            significant: p < 0.05,
        }
    }

    #[test]
    fn screening_needs_both_parents() {
        let pair = [(Attribute::Gender, Attribute::Income)];
        let main = vec![row(0.04, "gender"), row(0.5, "income"), row(0.09, "income")];
        assert_eq!(screen_interactions(&main, &pair, 0.10), pair.to_vec());
        let main = vec![row(0.04, "gender"), row(0.5, "income")];
        assert!(screen_interactions(&main, &pair, 0.10).is_empty());
        let main = vec![row(0.10, "gender"), row(0.01, "income")];
        assert!(screen_interactions(&main, &pair, 0.10).is_empty());
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::default().validate().is_ok());
        let mut s = ModelSpec::default();
        s.references.insert(Attribute::Gender, "Prefer not to say".into());
        assert!(s.validate().is_err());
        let s = ModelSpec {
            attributes: vec![Attribute::Gender],
            ..Default::default()
        }
        .with_interactions(vec![(Attribute::Gender, Attribute::Income)]);
        assert!(s.validate().is_err());
    }

    #[test]
    fn slugs() {
        assert_eq!(slug("Education and Careers"), "education_and_careers");
        assert_eq!(slug("Gambling"), "gambling");
    }
}
