//! Incidence-rate-ratio tables.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::panel::Column;
use crate::error::Result;
use crate::scalar::Scalar;

/// Two-sided 95% standard-normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrrRow {
    pub attribute: String,
    pub target: String,
    pub reference: String,
    pub beta: f64,
    pub se: f64,
    pub irr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p: f64,
    pub significant: bool,
}

/// Effect of `a` within a level of `b`: an interaction ratio times the
/// conditional main-effect IRR at the reference level of `b`.
pub fn implied_irr(interaction_ratio: f64, conditional_irr: f64) -> f64 {
    interaction_ratio * conditional_irr
}

pub fn wald<T: Scalar>(beta: T, se: T) -> (T, T, T, T) {
    let z = T::lit(Z95);
    let p = if se > T::zero() {
        T::two_sided_p(beta / se)
    } else {
        T::nan()
    };
    (beta.exp(), (beta - z * se).exp(), (beta + z * se).exp(), p)
}

fn labels(col: &Column) -> Option<(String, String, String)> {
    match col {
        Column::Intercept => None,
        Column::Main {
            attribute,
            level,
            reference,
        } => Some((attribute.to_string(), level.clone(), reference.clone())),
        Column::Interaction {
            a,
            level_a,
            reference_a,
            b,
            level_b,
            reference_b,
        } => Some((
            format!("{a}:{b}"),
            format!("{level_a} vs {reference_a} at {b} {level_b}"),
            format!("{level_a} vs {reference_a} at {b} {reference_b}"),
        )),
    }
}

/// One row per non-intercept coefficient, ascending by p-value (ties keep
/// design order; undefined p-values sort last).
pub fn irr_table<T: Scalar>(columns: &[Column], beta: &[T], se: &[T], alpha: f64) -> Vec<IrrRow> {
    let mut rows: Vec<IrrRow> = columns
        .iter()
        .zip(beta.iter().zip(se))
        .filter_map(|(c, (&b, &s))| {
            let (attribute, target, reference) = labels(c)?;
            let (irr, lo, hi, p) = wald(b, s);
            let p = p.as_f64();
            Some(IrrRow {
                attribute,
                target,
                reference,
                beta: b.as_f64(),
                se: s.as_f64(),
                irr: irr.as_f64(),
                ci_low: lo.as_f64(),
                ci_high: hi.as_f64(),
                p,
                significant: p < alpha,
            })
        })
        .collect();
    rows.sort_by(|a, b| match (a.p.is_nan(), b.p.is_nan()) {
        (false, false) => a.p.total_cmp(&b.p),
        (x, y) => x.cmp(&y),
    });
    rows
}

/// Writes the report table with estimates rounded to three decimals.
pub fn write_irr_csv<W: Write>(writer: W, rows: &[IrrRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "attribute",
        "target",
        "reference",
        "IRR",
        "CI_low",
        "CI_high",
        "p",
        "beta",
        "SE",
        "significant",
    ])?;
    for r in rows {
        w.write_record([
            r.attribute.clone(),
            r.target.clone(),
            r.reference.clone(),
            format!("{:.3}", r.irr),
            format!("{:.3}", r.ci_low),
            format!("{:.3}", r.ci_high),
            format!("{:.3}", r.p),
            format!("{:.3}", r.beta),
            format!("{:.3}", r.se),
            r.significant.to_string(),
        ])?;
    }
    w.flush().map_err(|e| crate::error::Error::io("<irr csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demographics::Attribute;

    #[test]
    fn implied_ratio() {
        assert_eq!(format!("{:.2}", implied_irr(0.22, 16.87)), "3.71");
        assert_eq!(implied_irr(1.0, 2.5), 2.5);
    }

    #[test]
    fn wald_interval() {
        let (irr, lo, hi, p) = wald(0.5f64, 0.25);
        assert!((irr - 0.5f64.exp()).abs() < 1e-15);
        assert!((lo - (0.5 - Z95 * 0.25f64).exp()).abs() < 1e-15);
        assert!((hi - (0.5 + Z95 * 0.25f64).exp()).abs() < 1e-15);
        assert!((p - 0.04550026389635842).abs() < 1e-12);
    }

    #[test]
    fn sorted_by_p() {
        let cols = vec![
            Column::Intercept,
            Column::Main {
                attribute: Attribute::Gender,
                level: "Male".into(),
                reference: "Female".into(),
            },
            Column::Main {
                attribute: Attribute::Gender,
                level: "Other".into(),
                reference: "Female".into(),
            },
        ];
        let rows = irr_table(&cols, &[1.0f64, 0.1, 2.0], &[0.1, 0.5, 0.5], 0.05);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].target, "Other");
        assert!(rows[0].significant && !rows[1].significant);
        let mut buf = Vec::new();
        write_irr_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("attribute,target,reference,IRR,CI_low,CI_high,p"));
        assert!(text.contains("gender,Other,Female,7.389,"));
    }
}
