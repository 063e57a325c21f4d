//! Scoring of reconstructed profiles against ground truth, with random and
//! census-prior baselines.

pub mod baselines;
pub mod harmonize;
pub mod metrics;

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::demographics::{Attribute, DemographicProfile};
use crate::error::Result;
use crate::reconstruct::{Condition, SessionPrediction, UserPrediction, ABSTAIN};

pub use baselines::{prior_mode, prior_sampling, random_accuracy, random_sampling, Sampled};
pub use harmonize::{CensusPrior, HarmonizationRules, Slice};
pub use metrics::{score_exact, score_lenient, Score};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Session,
    User,
}

impl Scope {
    pub fn name(self) -> &'static str {
        match self {
            Scope::Session => "session",
            Scope::User => "user",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Exact,
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub sampling_runs: usize,
    pub rules: HarmonizationRules,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            sampling_runs: 1000,
            rules: HarmonizationRules::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub scope: Scope,
    pub slice: Slice,
    pub method: String,
    pub attribute: Attribute,
    pub criterion: Criterion,
    pub accuracy: f64,
    pub accuracy_std: Option<f64>,
    pub macro_f1: f64,
    pub macro_f1_std: Option<f64>,
    pub n: usize,
    pub n_abstain: usize,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LenientRow {
    pub scope: Scope,
    pub slice: Slice,
    pub method: String,
    pub attribute: Attribute,
    pub exact_accuracy: f64,
    pub lenient_accuracy: f64,
    pub exact_f1: f64,
    pub lenient_f1: f64,
}

impl LenientRow {
    /// Relative improvement in percent; undefined when the exact value is 0.
    pub fn gain(exact: f64, lenient: f64) -> Option<f64> {
        (exact > 0.0).then(|| 100.0 * (lenient - exact) / exact)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub lenient: Vec<LenientRow>,
    pub seed: u64,
    pub sampling_runs: usize,
    pub prior_provenance: String,
    pub macro_f1_universe: String,
    pub lenient_f1_construction: String,
    pub abstention_policy: String,
}

/// One scored unit: who it is about and the raw predictions.
struct Unit<'a> {
    user_id: &'a str,
    predictions: &'a BTreeMap<Attribute, String>,
}

fn pairs(
    units: &[Unit<'_>],
    profiles: &BTreeMap<String, DemographicProfile>,
    attribute: Attribute,
    slice: Slice,
    rules: &HarmonizationRules,
) -> (Vec<String>, Vec<String>) {
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for u in units {
        let Some(profile) = profiles.get(u.user_id) else {
            continue;
        };
        let Some(t) = rules.harmonize(attribute, profile.level(attribute), slice) else {
            continue;
        };
        let p = u
            .predictions
            .get(&attribute)
            .map(String::as_str)
            .unwrap_or(ABSTAIN);
        preds.push(rules.harmonize_prediction(attribute, p, slice));
        truths.push(t);
    }
    (preds, truths)
}

fn label_universe(attribute: Attribute, slice: Slice, rules: &HarmonizationRules) -> Vec<String> {
    match slice {
        Slice::Full => attribute
            .prediction_labels()
            .iter()
            .filter(|l| rules.harmonize(attribute, l, slice).is_some())
            .map(|s| s.to_string())
            .collect(),
        Slice::Census => rules.categories(attribute, slice),
    }
}

struct Ctx<'a> {
    profiles: &'a BTreeMap<String, DemographicProfile>,
    rules: &'a HarmonizationRules,
    rows: Vec<EvalRow>,
    lenient: Vec<LenientRow>,
}

impl Ctx<'_> {
    fn score_method(&mut self, scope: Scope, slice: Slice, method: &str, units: &[Unit<'_>]) -> Result<()> {
        for attr in Attribute::ALL {
            let (preds, truths) = pairs(units, self.profiles, attr, slice, self.rules);
            if truths.is_empty() {
                continue;
            }
            let n_abstain = preds.iter().filter(|p| p.as_str() == ABSTAIN).count();
            let exact: Score<f64> = score_exact(&preds, &truths)?;
            self.rows.push(row(scope, slice, method, attr, Criterion::Exact, &exact, n_abstain));
            if attr.is_ordinal() {
                let order = self.rules.categories(attr, slice);
                let len: Score<f64> = score_lenient(attr, &order, &preds, &truths)?;
                self.rows.push(row(scope, slice, method, attr, Criterion::Lenient, &len, n_abstain));
                self.lenient.push(LenientRow {
                    scope,
                    slice,
                    method: method.to_string(),
                    attribute: attr,
                    exact_accuracy: exact.accuracy,
                    lenient_accuracy: len.accuracy,
                    exact_f1: exact.macro_f1,
                    lenient_f1: len.macro_f1,
                });
            }
        }
        Ok(())
    }

    fn baselines(
        &mut self,
        scope: Scope,
        slice: Slice,
        units: &[Unit<'_>],
        prior: Option<&CensusPrior>,
        runs: usize,
        seed: u64,
    ) -> Result<()> {
        for attr in Attribute::ALL {
            let (_, truths) = pairs(units, self.profiles, attr, slice, self.rules);
            if truths.is_empty() {
                continue;
            }
            let labels = label_universe(attr, slice, self.rules);
            let stream = format!("random/{}/{}/{}", scope.name(), slice.name(), attr.name());
            let mc = random_sampling(&labels, &truths, runs, seed, &stream)?;
            self.rows.push(EvalRow {
                scope,
                slice,
                method: "random".into(),
                attribute: attr,
                criterion: Criterion::Exact,
                accuracy: random_accuracy(labels.len()),
                accuracy_std: None,
                macro_f1: mc.macro_f1_mean,
                macro_f1_std: Some(mc.macro_f1_std),
                n: truths.len(),
                n_abstain: 0,
                note: format!("accuracy analytic 1/{}; macro-F1 Monte Carlo over {runs} runs", labels.len()),
            });
            let Some(prior) = prior else {
                continue;
            };
            let p = prior.get(attr)?;
            let (mode, tied) = prior_mode(p)?;
            let constant = vec![mode.clone(); truths.len()];
            let s: Score<f64> = score_exact(&constant, &truths)?;
            let mut r = row(scope, slice, "prior_mode", attr, Criterion::Exact, &s, 0);
            r.note = if tied {
                format!("predicts {mode} (tie broken lexicographically)")
            } else {
                format!("predicts {mode}")
            };
            self.rows.push(r);
            let stream = format!("prior/{}/{}/{}", scope.name(), slice.name(), attr.name());
            let sp = prior_sampling(p, &truths, runs, seed, &stream)?;
            self.rows.push(EvalRow {
                scope,
                slice,
                method: "prior_sampling".into(),
                attribute: attr,
                criterion: Criterion::Exact,
                accuracy: sp.accuracy_mean,
                accuracy_std: Some(sp.accuracy_std),
                macro_f1: sp.macro_f1_mean,
                macro_f1_std: Some(sp.macro_f1_std),
                n: truths.len(),
                n_abstain: 0,
                note: if sp.single_run {
                    "single run; spread undefined and reported as 0".into()
                } else {
                    format!("mean and std over {} runs", sp.runs)
                },
            });
        }
        Ok(())
    }
}

fn row(
    scope: Scope,
    slice: Slice,
    method: &str,
    attribute: Attribute,
    criterion: Criterion,
    s: &Score<f64>,
    n_abstain: usize,
) -> EvalRow {
    EvalRow {
        scope,
        slice,
        method: method.to_string(),
        attribute,
        criterion,
        accuracy: s.accuracy,
        accuracy_std: None,
        macro_f1: s.macro_f1,
        macro_f1_std: None,
        n: s.n,
        n_abstain,
        note: String::new(),
    }
}

/// Scores every condition present in the prediction sets. Session scope and
/// user scope are scored on the full category sets against random guessing;
/// user scope is additionally scored on the census-harmonized sets against
/// the prior baselines when a prior is given.
pub fn evaluate(
    profiles: &BTreeMap<String, DemographicProfile>,
    sessions: &[SessionPrediction],
    users: &[UserPrediction],
    prior: Option<&CensusPrior>,
    config: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    config.rules.validate()?;
    let mut ctx = Ctx {
        profiles,
        rules: &config.rules,
        rows: Vec::new(),
        lenient: Vec::new(),
    };
    let mut session_units: BTreeMap<Condition, Vec<Unit<'_>>> = BTreeMap::new();
    for s in sessions {
        session_units.entry(s.condition).or_default().push(Unit {
            user_id: &s.user_id,
            predictions: &s.predictions,
        });
    }
    let mut user_units: BTreeMap<Condition, Vec<Unit<'_>>> = BTreeMap::new();
    for u in users {
        user_units.entry(u.condition).or_default().push(Unit {
            user_id: &u.user_id,
            predictions: &u.predictions,
        });
    }
    let runs = config.sampling_runs;
    for (cond, units) in &session_units {
        ctx.score_method(Scope::Session, Slice::Full, cond.name(), units)?;
    }
    if let Some(units) = session_units.values().next() {
        ctx.baselines(Scope::Session, Slice::Full, units, None, runs, seed)?;
    }
    for (cond, units) in &user_units {
        ctx.score_method(Scope::User, Slice::Full, cond.name(), units)?;
    }
    if let Some(units) = user_units.values().next() {
        ctx.baselines(Scope::User, Slice::Full, units, None, runs, seed)?;
    }
    if let Some(prior) = prior {
        for (cond, units) in &user_units {
            ctx.score_method(Scope::User, Slice::Census, cond.name(), units)?;
        }
        if let Some(units) = user_units.values().next() {
            ctx.baselines(Scope::User, Slice::Census, units, Some(prior), runs, seed)?;
        }
    }
    Ok(EvalReport {
        rows: ctx.rows,
        lenient: ctx.lenient,
        seed,
        sampling_runs: runs,
        prior_provenance: prior.map(|p| p.provenance.clone()).unwrap_or_default(),
        macro_f1_universe: "unweighted mean of per-class F1 over the classes present in the truth set of each slice".into(),
        lenient_f1_construction: "predictions equal or adjacent to the true bracket are relabeled to the true class before the confusion matrix".into(),
        abstention_policy: format!("{ABSTAIN} counts as an incorrect prediction of no class"),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

pub fn write_eval_csv<W: Write>(writer: W, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "scope",
        "slice",
        "method",
        "attribute",
        "criterion",
        "accuracy",
        "accuracy_std",
        "macro_f1",
        "macro_f1_std",
        "n",
        "n_abstain",
        "note",
    ])?;
    for r in rows {
        w.write_record([
            r.scope.name().to_string(),
            r.slice.name().to_string(),
            r.method.clone(),
            r.attribute.name().to_string(),
            match r.criterion {
                Criterion::Exact => "exact".into(),
                Criterion::Lenient => "lenient".into(),
            },
            format!("{:.2}", r.accuracy),
            opt(r.accuracy_std),
            format!("{:.2}", r.macro_f1),
            opt(r.macro_f1_std),
            r.n.to_string(),
            r.n_abstain.to_string(),
            r.note.clone(),
        ])?;
    }
    w.flush().map_err(|e| crate::error::Error::io("<eval csv>", e))?;
    Ok(())
}

/// Exact and lenient rows side by side with relative improvements.
pub fn write_lenient_csv<W: Write>(writer: W, rows: &[LenientRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "scope",
        "slice",
        "method",
        "attribute",
        "exact_accuracy",
        "lenient_accuracy",
        "accuracy_gain_pct",
        "exact_f1",
        "lenient_f1",
        "f1_gain_pct",
    ])?;
    for r in rows {
        w.write_record([
            r.scope.name().to_string(),
            r.slice.name().to_string(),
            r.method.clone(),
            r.attribute.name().to_string(),
            format!("{:.2}", r.exact_accuracy),
            format!("{:.2}", r.lenient_accuracy),
            opt(LenientRow::gain(r.exact_accuracy, r.lenient_accuracy)),
            format!("{:.2}", r.exact_f1),
            format!("{:.2}", r.lenient_f1),
            opt(LenientRow::gain(r.exact_f1, r.lenient_f1)),
        ])?;
    }
    w.flush().map_err(|e| crate::error::Error::io("<lenient csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demographics::*;

    fn profile(id: &str, gender: Gender, age: AgeBracket) -> DemographicProfile {
        DemographicProfile {
            user_id: id.into(),
            gender,
            age_bracket: age,
            income_bracket: IncomeBracket::From52000,
            education: Education::Year12,
            employment: Employment::Retired,
            party: Party::Greens,
        }
    }

    fn user(id: &str, cond: Condition, gender: &str, age: &str) -> UserPrediction {
        let mut p = BTreeMap::new();
        p.insert(Attribute::Gender, gender.to_string());
        p.insert(Attribute::Age, age.to_string());
        p.insert(Attribute::Income, "$41,600-$51,999".to_string());
        p.insert(Attribute::Education, "Less than year 12 or equivalent".to_string());
        p.insert(Attribute::Employment, "Retired".to_string());
        p.insert(Attribute::Party, ABSTAIN.to_string());
        UserPrediction {
            user_id: id.into(),
            condition: cond,
            predictions: p,
            n_sessions_used: 3,
        }
    }

    #[test]
    fn end_to_end_rows() {
        let profiles: BTreeMap<String, DemographicProfile> = [
            profile("a", Gender::Female, AgeBracket::Age25To34),
            profile("b", Gender::Male, AgeBracket::Age18To24),
            profile("c", Gender::Other, AgeBracket::PreferNotToSay),
        ]
        .into_iter()
        .map(|p| (p.user_id.clone(), p))
        .collect();
        let users = vec![
            user("a", Condition::Sequential, "Female", "35-44"),
            user("b", Condition::Sequential, "Female", "45-54"),
            user("c", Condition::Sequential, "Male", "18-24"),
        ];
        let prior = CensusPrior::bundled(&HarmonizationRules::default()).unwrap();
        let cfg = EvalConfig {
            sampling_runs: 50,
            ..Default::default()
        };
        let rep = evaluate(&profiles, &[], &users, Some(&prior), &cfg, 3).unwrap();
        let find = |slice, method: &str, attr, crit| {
            rep.rows
                .iter()
                .find(|r| r.slice == slice && r.method == method && r.attribute == attr && r.criterion == crit)
                .unwrap()
        };
        let g = find(Slice::Full, "sequential", Attribute::Gender, Criterion::Exact);
        assert_eq!((g.n, g.accuracy), (2, 50.0));
        let a = find(Slice::Full, "sequential", Attribute::Age, Criterion::Lenient);
        assert_eq!(a.accuracy, 50.0);
        // Year 12 vs less than year 12 merge to the same census class.
        let e = find(Slice::Census, "sequential", Attribute::Education, Criterion::Exact);
        assert_eq!(e.accuracy, 100.0);
        // Retired truths leave the census employment slice entirely.
        assert!(!rep.rows.iter().any(|r| r.slice == Slice::Census && r.attribute == Attribute::Employment));
        let p = find(Slice::Full, "sequential", Attribute::Party, Criterion::Exact);
        assert_eq!((p.accuracy, p.n_abstain), (0.0, 3));
        let m = find(Slice::Census, "prior_mode", Attribute::Gender, Criterion::Exact);
        assert_eq!(m.note, "predicts Female");
        let r = find(Slice::Full, "random", Attribute::Age, Criterion::Exact);
        assert!((r.accuracy - 100.0 / 7.0).abs() < 1e-12);
        for l in &rep.lenient {
            assert!(l.lenient_accuracy >= l.exact_accuracy);
        }
        let mut buf = Vec::new();
        write_eval_csv(&mut buf, &rep.rows).unwrap();
        write_lenient_csv(Vec::new(), &rep.lenient).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("scope,slice,method"));
    }
}
