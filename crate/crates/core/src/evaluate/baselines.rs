//! Random-guessing and census-prior baselines.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{score_exact, Score};
use crate::error::{Error, Result};

/// Expected accuracy (%) of uniform guessing over `k` classes.
pub fn random_accuracy(k: usize) -> f64 {
    100.0 / k as f64
}

/// Independent RNG for run `run` of stream `label`.
pub fn derived_rng(seed: u64, label: &str, run: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(run.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampled {
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub macro_f1_mean: f64,
    pub macro_f1_std: f64,
    pub runs: usize,
    /// Set when a single run makes the spread undefined (reported as 0).
    pub single_run: bool,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize(scores: &[Score<f64>]) -> Sampled {
    let acc: Vec<f64> = scores.iter().map(|s| s.accuracy).collect();
    let f1: Vec<f64> = scores.iter().map(|s| s.macro_f1).collect();
    let (am, asd) = mean_std(&acc);
    let (fm, fsd) = mean_std(&f1);
    Sampled {
        accuracy_mean: am,
        accuracy_std: asd,
        macro_f1_mean: fm,
        macro_f1_std: fsd,
        runs: scores.len(),
        single_run: scores.len() == 1,
    }
}

/// Runs `runs` i.i.d. prediction draws in parallel; the reduction is in run
/// order so the result does not depend on scheduling.
fn simulate<F>(truths: &[String], runs: usize, seed: u64, label: &str, draw: F) -> Result<Sampled>
where
    F: Fn(&mut ChaCha8Rng) -> String + Sync,
{
    if runs == 0 {
        return Err(Error::Evaluation("sampling baseline needs at least one run".into()));
    }
    let scores: Vec<Score<f64>> = (0..runs as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = derived_rng(seed, label, r);
            let preds: Vec<String> = truths.iter().map(|_| draw(&mut rng)).collect();
            score_exact(&preds, truths)
        })
        .collect::<Result<_>>()?;
    Ok(summarize(&scores))
}

/// Monte Carlo estimate of uniform guessing over `labels`.
pub fn random_sampling(labels: &[String], truths: &[String], runs: usize, seed: u64, label: &str) -> Result<Sampled> {
    if labels.is_empty() {
        return Err(Error::Evaluation("no labels to guess from".into()));
    }
    simulate(truths, runs, seed, label, |rng| {
        labels.choose(rng).expect("non-empty").clone()
    })
}

/// Majority class of the prior; ties go to the lexicographically first
/// label and are flagged.
pub fn prior_mode(prior: &BTreeMap<String, f64>) -> Result<(String, bool)> {
    let max = prior
        .values()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut best = prior.iter().filter(|(_, &p)| p == max).map(|(k, _)| k);
    let first = best
        .next()
        .ok_or_else(|| Error::Prior("empty prior".into()))?
        .clone();
    let tied = best.next().is_some();
    if tied {
        log::warn!("prior mode is tied; picked {first:?}");
    }
    Ok((first, tied))
}

pub fn prior_sampling(
    prior: &BTreeMap<String, f64>,
    truths: &[String],
    runs: usize,
    seed: u64,
    label: &str,
) -> Result<Sampled> {
    let labels: Vec<&String> = prior.keys().collect();
    let dist = WeightedIndex::new(prior.values().copied())
        .map_err(|e| Error::Prior(format!("invalid prior weights: {e}")))?;
    simulate(truths, runs, seed, label, |rng| labels[dist.sample(rng)].clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prior(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn random_rows() {
        let got: Vec<String> = [2, 7, 12, 4, 5, 5]
            .iter()
            .map(|&k| format!("{:.2}", random_accuracy(k)))
            .collect();
        assert_eq!(got, ["50.00", "14.29", "8.33", "25.00", "20.00", "20.00"]);
    }

    #[test]
    fn mode_and_ties() {
        assert_eq!(
            prior_mode(&prior(&[("Male", 0.4935), ("Female", 0.5065)])).unwrap(),
            ("Female".to_string(), false)
        );
        assert_eq!(
            prior_mode(&prior(&[("b", 0.5), ("a", 0.5)])).unwrap(),
            ("a".to_string(), true)
        );
    }

    #[test]
    fn degenerate_prior_and_single_run() {
        let truths: Vec<String> = ["a", "b", "a"].iter().map(|s| s.to_string()).collect();
        let s = prior_sampling(&prior(&[("a", 1.0), ("b", 0.0)]), &truths, 20, 1, "x").unwrap();
        assert!((s.accuracy_mean - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.accuracy_std, 0.0);
        let s = prior_sampling(&prior(&[("a", 0.5), ("b", 0.5)]), &truths, 1, 1, "x").unwrap();
        assert!(s.single_run && s.accuracy_std == 0.0);
        assert!(prior_sampling(&prior(&[("a", 1.0)]), &truths, 0, 1, "x").is_err());
    }

    #[test]
    fn reproducible() {
        let truths: Vec<String> = (0..50).map(|i| if i % 3 == 0 { "a" } else { "b" }.to_string()).collect();
        let p = prior(&[("a", 0.3), ("b", 0.7)]);
        assert_eq!(
            prior_sampling(&p, &truths, 100, 9, "g").unwrap(),
            prior_sampling(&p, &truths, 100, 9, "g").unwrap()
        );
    }
}
