use std::collections::{BTreeMap, BTreeSet};

use ad_audit::demographics::Attribute;
use ad_audit::evaluate::{score_exact, score_lenient, CensusPrior, HarmonizationRules, Score, Slice};
use proptest::prelude::*;

/// Accuracy and macro-F1 (over the classes present in the truth) by
/// counting every class separately.
fn brute(preds: &[String], truths: &[String]) -> (f64, f64) {
    let n = truths.len() as f64;
    let acc = preds.iter().zip(truths).filter(|(p, t)| p == t).count() as f64 / n * 100.0;
    let classes: BTreeSet<&String> = truths.iter().collect();
    let mut f1s = Vec::new();
    for c in &classes {
        let tp = preds.iter().zip(truths).filter(|(p, t)| p == c && t == c).count() as f64;
        let fp = preds.iter().zip(truths).filter(|(p, t)| p == c && t != c).count() as f64;
        let fn_ = preds.iter().zip(truths).filter(|(p, t)| p != c && t == c).count() as f64;
        let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let rec = tp / (tp + fn_);
        f1s.push(if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 });
    }
    (acc, f1s.iter().sum::<f64>() / f1s.len() as f64 * 100.0)
}

fn labels(attr: Attribute) -> Vec<String> {
    attr.levels()[..attr.levels().len() - 1].iter().map(|s| s.to_string()).collect()
}

fn pairs(k: usize) -> impl Strategy<Value = Vec<(usize, usize)>> {
    proptest::collection::vec((0..k, 0..k + 1), 1..120)
}

proptest! {
    #[test]
    fn exact_scores_match_brute_force(idx in pairs(5)) {
        let names = ["a", "b", "c", "d", "e", "ABSTAIN"];
        let preds: Vec<String> = idx.iter().map(|&(_, p)| names[p].to_string()).collect();
        let truths: Vec<String> = idx.iter().map(|&(t, _)| names[t].to_string()).collect();
        let s: Score<f64> = score_exact(&preds, &truths).unwrap();
        let (acc, f1) = brute(&preds, &truths);
        prop_assert!((s.accuracy - acc).abs() < 1e-9);
        prop_assert!((s.macro_f1 - f1).abs() < 1e-9);
        prop_assert_eq!(s.n, truths.len());
    }

    #[test]
    fn lenient_never_scores_below_exact(idx in pairs(7)) {
        let order = labels(Attribute::Age);
        let preds: Vec<String> = idx.iter().map(|&(_, p)| order.get(p).cloned().unwrap_or_else(|| "ABSTAIN".into())).collect();
        let truths: Vec<String> = idx.iter().map(|&(t, _)| order[t].clone()).collect();
        let e: Score<f64> = score_exact(&preds, &truths).unwrap();
        let l: Score<f64> = score_lenient(Attribute::Age, &order, &preds, &truths).unwrap();
        prop_assert!(l.accuracy >= e.accuracy - 1e-12);
        prop_assert!(l.macro_f1 >= e.macro_f1 - 1e-12);
    }
}

#[test]
fn lenient_rejects_nominal_attributes() {
    let order = labels(Attribute::Party);
    assert!(score_lenient::<f64, _, _>(Attribute::Party, &order, &["Greens"], &["Labor"]).is_err());
}

#[test]
fn census_prior_round_trips_through_csv() {
    let rules = HarmonizationRules::default();
    let prior = CensusPrior::bundled(&rules).unwrap();
    let again = CensusPrior::from_csv(&prior.to_csv(), &rules).unwrap();
    for attr in Attribute::ALL {
        let (a, b) = (prior.get(attr).unwrap(), again.get(attr).unwrap());
        assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
        for (k, v) in a {
            assert!((v - b[k]).abs() < 1e-12, "{attr} {k}");
        }
        let cats: BTreeSet<String> = rules.categories(attr, Slice::Census).into_iter().collect();
        assert_eq!(a.keys().cloned().collect::<BTreeSet<_>>(), cats);
    }
}

#[test]
fn census_slice_merges_and_excludes() {
    let rules = HarmonizationRules::default();
    let edu: BTreeMap<&str, Option<String>> = Attribute::Education
        .levels()
        .iter()
        .map(|l| (*l, rules.harmonize(Attribute::Education, l, Slice::Census)))
        .collect();
    assert_eq!(rules.categories(Attribute::Education, Slice::Census).len(), 3);
    assert!(edu.values().flatten().any(|v| v == "No Degree"));
    assert_eq!(rules.harmonize(Attribute::Employment, "Retired", Slice::Census), None);
    assert_eq!(rules.harmonize(Attribute::Employment, "Retired", Slice::Full).as_deref(), Some("Retired"));
    assert_eq!(rules.harmonize(Attribute::Gender, "Other", Slice::Full), None);
}
