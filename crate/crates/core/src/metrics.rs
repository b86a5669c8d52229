//! Positive-class scoring, self-consistency votes, run averaging and F1 deltas.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;
use crate::parsing::ParsedResponse;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction and gold key sets differ: only in predictions {only_preds:?}, only in gold {only_gold:?}")]
    KeyMismatch { only_preds: Vec<String>, only_gold: Vec<String> },
    #[error("cannot average zero score triples")]
    Empty,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn record(&mut self, predicted: Label, gold: Label) {
        match (predicted.is_positive(), gold.is_positive()) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn scores(&self) -> ScoreReport {
        let ratio = |num: usize, den: usize| if den == 0 { (0.0, true) } else { (num as f64 / den as f64, false) };
        let (precision, precision_undefined) = ratio(self.tp, self.tp + self.fp);
        let (recall, recall_undefined) = ratio(self.tp, self.tp + self.fn_);
        ScoreReport {
            counts: *self,
            scores: ScoreTriple::new(precision, recall),
            precision_undefined,
            recall_undefined,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreTriple {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ScoreTriple {
    /// Builds a triple with `f1` as the harmonic mean (0 when P+R = 0).
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        ScoreTriple { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub counts: ConfusionCounts,
    pub scores: ScoreTriple,
    /// No positive predictions, so precision was set to 0.
    pub precision_undefined: bool,
    /// No positive gold labels, so recall was set to 0.
    pub recall_undefined: bool,
}

/// Precision, recall and F1 for the positive class.
pub fn score_positive_class(
    preds: &HashMap<String, Label>,
    gold: &HashMap<String, Label>,
) -> Result<ScoreReport, MetricsError> {
    let only_preds: BTreeSet<&String> = preds.keys().filter(|k| !gold.contains_key(*k)).collect();
    let only_gold: BTreeSet<&String> = gold.keys().filter(|k| !preds.contains_key(*k)).collect();
    if !only_preds.is_empty() || !only_gold.is_empty() {
        return Err(MetricsError::KeyMismatch {
            only_preds: only_preds.into_iter().cloned().collect(),
            only_gold: only_gold.into_iter().cloned().collect(),
        });
    }
    let mut counts = ConfusionCounts::default();
    for (id, predicted) in preds {
        counts.record(*predicted, gold[id]);
    }
    Ok(counts.scores())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    /// `None` when no run produced a valid label.
    pub label: Option<Label>,
    pub tie: bool,
    pub yes: usize,
    pub no: usize,
    pub invalid: usize,
}

/// Majority vote over valid runs. A tie resolves to the negative class with
/// `tie` set.
pub fn majority_vote<'a, I>(runs: I) -> Vote
where
    I: IntoIterator<Item = &'a ParsedResponse>,
{
    vote_labels(runs.into_iter().map(|r| if r.is_valid() { r.label } else { None }))
}

/// Same rule over already-extracted labels (`None` = invalid run).
pub fn vote_labels<I: IntoIterator<Item = Option<Label>>>(labels: I) -> Vote {
    let (mut yes, mut no, mut invalid) = (0, 0, 0);
    for l in labels {
        match l {
            Some(Label::Antisemitic) => yes += 1,
            Some(Label::NonAntisemitic) => no += 1,
            None => invalid += 1,
        }
    }
    let (label, tie) = match (yes + no, yes.cmp(&no)) {
        (0, _) => (None, false),
        (_, std::cmp::Ordering::Greater) => (Some(Label::Antisemitic), false),
        (_, std::cmp::Ordering::Less) => (Some(Label::NonAntisemitic), false),
        (_, std::cmp::Ordering::Equal) => (Some(Label::NonAntisemitic), true),
    };
    Vote { label, tie, yes, no, invalid }
}

/// Component-wise mean of per-run score triples.
pub fn average_over_runs(per_run: &[ScoreTriple]) -> Result<ScoreTriple, MetricsError> {
    if per_run.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = per_run.len() as f64;
    let sum = per_run.iter().fold((0.0, 0.0, 0.0), |acc, s| (acc.0 + s.precision, acc.1 + s.recall, acc.2 + s.f1));
    Ok(ScoreTriple { precision: sum.0 / n, recall: sum.1 / n, f1: sum.2 / n })
}

/// Signed F1 change going from `base` to `other`.
pub fn delta(base: &ScoreTriple, other: &ScoreTriple) -> f64 {
    other.f1 - base.f1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parsing::{Category, ParseFlags};

    fn map(pairs: &[(&str, Label)]) -> HashMap<String, Label> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn run(label: Option<Label>) -> ParsedResponse {
        ParsedResponse {
            category: if label.is_some() { Category::Valid } else { Category::FailureRefusal },
            label,
            raw_label_text: None,
            summary: None,
            body_without_thinking: String::new(),
            flags: ParseFlags::default(),
        }
    }

    const Y: Label = Label::Antisemitic;
    const N: Label = Label::NonAntisemitic;

    #[test]
    fn perfect_predictions() {
        let gold = map(&[("a", Y), ("b", N), ("c", Y)]);
        let r = score_positive_class(&gold, &gold).unwrap();
        assert_eq!((r.scores.precision, r.scores.recall, r.scores.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn hand_arithmetic_case() {
        // tp=5, fp=3, fn=2, tn=1
        let mut preds = Vec::new();
        let mut gold = Vec::new();
        let mut push = |i: usize, p: Label, g: Label| {
            preds.push((format!("p{i}"), p));
            gold.push((format!("p{i}"), g));
        };
        let mut i = 0;
        for (p, g, n) in [(Y, Y, 5), (Y, N, 3), (N, Y, 2), (N, N, 1)] {
            for _ in 0..n {
                push(i, p, g);
                i += 1;
            }
        }
        let r = score_positive_class(&preds.into_iter().collect(), &gold.into_iter().collect()).unwrap();
        assert_eq!(r.counts, ConfusionCounts { tp: 5, fp: 3, tn: 1, fn_: 2 });
        assert!((r.scores.precision - 0.625).abs() < 1e-15);
        assert!((r.scores.recall - 5.0 / 7.0).abs() < 1e-15);
        assert!((r.scores.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn no_positive_predictions_is_degenerate() {
        let preds = map(&[("a", N), ("b", N)]);
        let gold = map(&[("a", Y), ("b", N)]);
        let r = score_positive_class(&preds, &gold).unwrap();
        assert!(r.precision_undefined);
        assert!(!r.recall_undefined);
        assert_eq!((r.scores.precision, r.scores.recall, r.scores.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn key_mismatch_lists_difference() {
        let preds = map(&[("a", N), ("x", N)]);
        let gold = map(&[("a", Y), ("b", N)]);
        assert_eq!(
            score_positive_class(&preds, &gold),
            Err(MetricsError::KeyMismatch { only_preds: vec!["x".into()], only_gold: vec!["b".into()] })
        );
    }

    #[test]
    fn votes() {
        let mk = |y: usize, n: usize, bad: usize| {
            let mut v: Vec<_> = std::iter::repeat_n(run(Some(Y)), y).collect();
            v.extend(std::iter::repeat_n(run(Some(N)), n));
            v.extend(std::iter::repeat_n(run(None), bad));
            v
        };
        let v = majority_vote(&mk(20, 10, 0));
        assert_eq!((v.label, v.tie), (Some(Y), false));
        let v = majority_vote(&mk(15, 15, 0));
        assert_eq!((v.label, v.tie), (Some(N), true));
        let v = majority_vote(&mk(10, 8, 12));
        assert_eq!((v.label, v.yes, v.no, v.invalid), (Some(Y), 10, 8, 12));
        let v = majority_vote(&mk(0, 0, 30));
        assert_eq!(v.label, None);
        let v = majority_vote(&mk(16, 14, 0));
        assert_eq!(v.label, Some(Y));
    }

    #[test]
    fn indeterminate_runs_do_not_vote() {
        let mut ind = run(None);
        ind.category = Category::Indeterminate;
        let v = majority_vote(&[ind, run(Some(Y))]);
        assert_eq!((v.label, v.invalid), (Some(Y), 1));
    }

    #[test]
    fn averaging() {
        let one = ScoreTriple { precision: 1.0, recall: 1.0, f1: 1.0 };
        assert_eq!(average_over_runs(&[one]).unwrap(), one);
        let a = ScoreTriple { precision: 0.4, recall: 0.6, f1: 0.48 };
        let b = ScoreTriple { precision: 0.6, recall: 0.6, f1: 0.6 };
        let m = average_over_runs(&[a, b]).unwrap();
        assert!((m.precision - 0.5).abs() < 1e-15 && (m.recall - 0.6).abs() < 1e-15 && (m.f1 - 0.54).abs() < 1e-15);
        assert_eq!(average_over_runs(&[a; 5]).unwrap(), a);
        assert_eq!(average_over_runs(&[]), Err(MetricsError::Empty));
    }

    #[test]
    fn deltas() {
        let t = |f1: f64| ScoreTriple { precision: 0.0, recall: 0.0, f1 };
        assert_eq!(delta(&t(0.3), &t(0.3)), 0.0);
        assert!((delta(&t(0.49), &t(0.44)) + 0.05).abs() < 1e-12);
        assert!((delta(&t(0.50), &t(0.63)) - 0.13).abs() < 1e-12);
    }
}
