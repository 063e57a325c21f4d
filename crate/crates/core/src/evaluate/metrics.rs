//! Accuracy and macro-F1 under exact and lenient criteria.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::demographics::Attribute;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Percentages in `[0, 100]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score<T> {
    pub accuracy: T,
    pub macro_f1: T,
    pub n: usize,
}

/// Macro-F1 averages over the classes present in `truths`. A prediction
/// outside that universe (an abstention, say) is simply wrong.
pub fn score_exact<T: Scalar, P: AsRef<str>, Q: AsRef<str>>(predictions: &[P], truths: &[Q]) -> Result<Score<T>> {
    if predictions.len() != truths.len() {
        return Err(Error::Evaluation(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if truths.is_empty() {
        return Err(Error::Evaluation("no prediction/truth pairs".into()));
    }
    let classes: Vec<&str> = truths
        .iter()
        .map(AsRef::as_ref)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut tp = vec![0usize; classes.len()];
    let mut fp = vec![0usize; classes.len()];
    let mut fneg = vec![0usize; classes.len()];
    let mut correct = 0usize;
    for (p, t) in predictions.iter().zip(truths) {
        let (p, t) = (p.as_ref(), t.as_ref());
        let ti = classes.binary_search(&t).expect("truth class in universe");
        if p == t {
            correct += 1;
            tp[ti] += 1;
        } else {
            fneg[ti] += 1;
            if let Ok(pi) = classes.binary_search(&p) {
                fp[pi] += 1;
            }
        }
    }
    let hundred = T::lit(100.0);
    let f1_sum: T = (0..classes.len())
        .map(|k| {
            let denom = 2 * tp[k] + fp[k] + fneg[k];
            if denom == 0 {
                T::zero()
            } else {
                T::from_usize_lossy(2 * tp[k]) / T::from_usize_lossy(denom)
            }
        })
        .sum();
    Ok(Score {
        accuracy: hundred * T::from_usize_lossy(correct) / T::from_usize_lossy(truths.len()),
        macro_f1: hundred * f1_sum / T::from_usize_lossy(classes.len()),
        n: truths.len(),
    })
}

/// Equal or one bracket apart in `order`.
pub fn adjacent(order: &[String], a: &str, b: &str) -> bool {
    match (order.iter().position(|x| x == a), order.iter().position(|x| x == b)) {
        (Some(i), Some(j)) => i.abs_diff(j) <= 1,
        _ => false,
    }
}

/// Credits predictions in the true bracket or an adjacent one by relabeling
/// them to the truth, then scores exactly.
pub fn score_lenient<T: Scalar, P: AsRef<str>, Q: AsRef<str>>(
    attribute: Attribute,
    order: &[String],
    predictions: &[P],
    truths: &[Q],
) -> Result<Score<T>> {
    if !attribute.is_ordinal() {
        return Err(Error::Evaluation(format!("{attribute} has no bracket order")));
    }
    let relabeled: Vec<&str> = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| {
            if adjacent(order, p.as_ref(), t.as_ref()) {
                t.as_ref()
            } else {
                p.as_ref()
            }
        })
        .collect();
    score_exact(&relabeled, truths)
}
