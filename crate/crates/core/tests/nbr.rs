use std::collections::BTreeMap;

use ad_audit::audit::{self, ExposureCell};
use ad_audit::demographics::Attribute;
use ad_audit::linalg::Matrix;
use ad_audit::nbr::{self, fit_nb2, FitOptions, ModelSpec, NbrConfig, PanelRow};
use ad_audit::synth::{self, CohortConfig, NbPanelConfig};
use proptest::prelude::*;

fn gender_spec() -> ModelSpec {
    ModelSpec {
        attributes: vec![Attribute::Gender],
        ..ModelSpec::default()
    }
}

/// Two-column Poisson fit by Newton steps on the closed-form 2x2 system.
fn poisson_two_column(x1: &[f64], y: &[f64], offset: &[f64]) -> [f64; 2] {
    let mut b = [0.0f64, 0.0];
    for _ in 0..200 {
        let (mut g, mut h) = ([0.0; 2], [[0.0; 2]; 2]);
        for i in 0..y.len() {
            let xi = [1.0, x1[i]];
            let mu = (b[0] + b[1] * xi[1] + offset[i]).exp();
            for j in 0..2 {
                g[j] += xi[j] * (y[i] - mu);
                for k in 0..2 {
                    h[j][k] += mu * xi[j] * xi[k];
                }
            }
        }
        let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
        let d0 = (h[1][1] * g[0] - h[0][1] * g[1]) / det;
        let d1 = (h[0][0] * g[1] - h[1][0] * g[0]) / det;
        b[0] += d0;
        b[1] += d1;
        if d0.abs().max(d1.abs()) < 1e-14 {
            break;
        }
    }
    b
}

fn small_panel(seed: u64) -> Vec<PanelRow> {
    synth::nb_panel(&NbPanelConfig {
        users: 40,
        weeks: 5,
        seed,
        ..NbPanelConfig::default()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exposure_scaling_only_moves_the_intercept(seed in 0u64..10_000, c in 2u64..20) {
        let rows = small_panel(seed);
        let scaled: Vec<PanelRow> = rows.iter().cloned().map(|mut r| { r.exposure *= c; r }).collect();
        let opts = FitOptions::default();
        let a = nbr::fit_model::<f64>(&rows, &gender_spec(), &opts, 0.05).unwrap();
        let b = nbr::fit_model::<f64>(&scaled, &gender_spec(), &opts, 0.05).unwrap();
        prop_assert!((b.fit.beta[0] - a.fit.beta[0] + (c as f64).ln()).abs() < 1e-6);
        prop_assert!((b.fit.beta[1] - a.fit.beta[1]).abs() < 1e-6);
        prop_assert!((b.fit.alpha - a.fit.alpha).abs() < 1e-6);
    }

    #[test]
    fn poisson_limit_matches_closed_form_newton(seed in 0u64..10_000) {
        let rows = small_panel(seed);
        let x1: Vec<f64> = rows.iter().map(|r| if r.covariates[&Attribute::Gender] == "Male" { 1.0 } else { 0.0 }).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.y as f64).collect();
        let off: Vec<f64> = rows.iter().map(|r| (r.exposure as f64).ln()).collect();
        let x = Matrix::from_rows(&x1.iter().map(|&v| vec![1.0, v]).collect::<Vec<_>>());
        let fit = fit_nb2(&x, &y, &off, &FitOptions::poisson()).unwrap();
        let want = poisson_two_column(&x1, &y, &off);
        prop_assert!((fit.beta[0] - want[0]).abs() < 1e-6);
        prop_assert!((fit.beta[1] - want[1]).abs() < 1e-6);
    }

    #[test]
    fn irr_rows_are_sorted_and_consistent(seed in 0u64..10_000) {
        let rows = small_panel(seed);
        let m = nbr::fit_model::<f64>(&rows, &gender_spec(), &FitOptions::default(), 0.05).unwrap();
        for w in m.irr.windows(2) {
            prop_assert!(w[0].p <= w[1].p);
        }
        for r in &m.irr {
            prop_assert!((r.ci_low * r.ci_high / (r.irr * r.irr) - 1.0).abs() < 1e-12);
            prop_assert_eq!(r.significant, r.p < 0.05);
        }
    }
}

#[test]
fn f32_and_f64_fits_agree() {
    let rows = small_panel(1);
    let a = nbr::fit_model::<f64>(&rows, &gender_spec(), &FitOptions::default(), 0.05).unwrap();
    let opts = FitOptions {
        tol: 1e-3,
        ..FitOptions::default()
    };
    let b = nbr::fit_model::<f32>(&rows, &gender_spec(), &opts, 0.05).unwrap();
    for (x, y) in a.fit.beta.iter().zip(&b.fit.beta) {
        assert!((x - f64::from(*y)).abs() < 1e-3, "{x} vs {y}");
    }
}

#[test]
fn categories_fit_on_a_generated_cohort() {
    let cohort = synth::generate_cohort(&CohortConfig {
        users: 150,
        weeks: 6,
        seed: 21,
        decline_rate: 0.05,
        ..CohortConfig::default()
    });
    let feats: BTreeMap<_, _> = cohort
        .impressions
        .iter()
        .map(|i| {
            let cat = match i.ad_id.split('-').nth(1).unwrap() {
                "gambling" => "Gambling",
                "alcohol" => "Alcohol",
                "politics" => "Politics",
                "education" => "Education and Careers",
                _ => "Shopping",
            };
            (
                i.ad_id.clone(),
                ad_audit::features::AdFeatures {
                    ad_id: i.ad_id.clone(),
                    caption: String::new(),
                    descriptive_categories: vec![],
                    iab_categories: vec![cat.into()],
                    key_entities: vec![],
                },
            )
        })
        .collect();
    let epoch = audit::dataset_epoch(&cohort).unwrap();
    let cells: Vec<ExposureCell> = audit::build_cells(&cohort, &feats, epoch).unwrap().cells;
    let cfg = NbrConfig::default();
    for cat in &cfg.categories {
        let fits = nbr::run_category(&cells, &cohort.profiles, cat, &cfg).unwrap();
        assert!(fits.main.fit.converged, "{cat} did not converge");
        let clusters = fits.main.fit.n_clusters.unwrap();
        assert!(clusters > 100 && clusters <= 150, "{clusters} clusters");
        assert!(!fits.main.irr.is_empty());
        // Declined answers never enter the model.
        assert!(fits.main.columns.iter().all(|c| !c.contains("Prefer not to say")));
        if let Some(inter) = &fits.interaction {
            assert!(fits.screened.contains(&(Attribute::Gender, Attribute::Income)));
            assert!(inter.columns.iter().any(|c| c.contains(':')));
        }
    }
}
