//! Scores and cross-validation summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Fraction of exact matches.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape("predictions", truth.len(), pred.len()));
    }
    if truth.is_empty() {
        return Err(Error::InvalidInput("accuracy of an empty sample".into()));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// One-vs-rest balanced accuracy for class `y`: the mean of sensitivity
/// (maps of class `y` predicted as `y`) and specificity (maps of other
/// classes not predicted as `y`). Chance level is 0.5 for any class count.
pub fn balanced_accuracy(pred: &[usize], truth: &[usize], y: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape("predictions", truth.len(), pred.len()));
    }
    let (mut tp, mut fn_, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (t == y, p == y) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    if tp + fn_ == 0 {
        return Err(Error::InvalidInput(format!("class {y} absent from ground truth")));
    }
    let sensitivity = tp as f64 / (tp + fn_) as f64;
    // with a single class present, every map is positive and specificity is vacuous
    let specificity = if tn + fp == 0 { 1.0 } else { tn as f64 / (tn + fp) as f64 };
    Ok(0.5 * (sensitivity + specificity))
}

/// Linear-interpolation quantile of sorted data (`q` in [0, 1]).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Key of one score: study id and split index.
pub type ScoreKey = (String, usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainSummary {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub fraction_positive: f64,
}

/// Summarizes `scores - baseline` over matched (study, split) keys.
pub fn gain_summary(scores: &BTreeMap<ScoreKey, f64>, baseline: &BTreeMap<ScoreKey, f64>) -> Result<GainSummary> {
    if scores.len() != baseline.len() {
        return Err(Error::InvalidInput(format!(
            "gain summary: {} scores vs {} baseline scores",
            scores.len(),
            baseline.len()
        )));
    }
    let mut diffs = Vec::with_capacity(scores.len());
    for (key, s) in scores {
        let b = baseline.get(key).ok_or_else(|| {
            Error::InvalidInput(format!("no baseline score for study `{}` split {}", key.0, key.1))
        })?;
        diffs.push(s - b);
    }
    summarize(diffs)
}

pub fn summarize(mut diffs: Vec<f64>) -> Result<GainSummary> {
    if diffs.is_empty() {
        return Err(Error::InvalidInput("gain summary of no scores".into()));
    }
    let n = diffs.len();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let positive = diffs.iter().filter(|&&d| d > 0.0).count() as f64 / n as f64;
    diffs.sort_by(f64::total_cmp);
    Ok(GainSummary {
        n,
        mean,
        median: quantile_sorted(&diffs, 0.5),
        q25: quantile_sorted(&diffs, 0.25),
        q75: quantile_sorted(&diffs, 0.75),
        fraction_positive: positive,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyRow {
    pub method: String,
    pub study: String,
    pub split: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalancedRow {
    pub method: String,
    pub study: String,
    pub split: usize,
    pub contrast: String,
    pub balanced_accuracy: f64,
}

/// Accuracy tables and gain summaries of one evaluation run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvaluationReport {
    pub accuracy: Vec<AccuracyRow>,
    pub balanced: Vec<BalancedRow>,
    /// `(method, baseline, summary)`.
    pub gains: Vec<(String, String, GainSummary)>,
}

impl EvaluationReport {
    /// Scores one method's predictions on one study of one split.
    pub fn record(
        &mut self,
        method: &str,
        study: &str,
        split: usize,
        pred: &[usize],
        truth: &[usize],
        contrasts: &[String],
    ) -> Result<()> {
        self.accuracy.push(AccuracyRow {
            method: method.to_string(),
            study: study.to_string(),
            split,
            accuracy: accuracy(pred, truth)?,
        });
        for (y, name) in contrasts.iter().enumerate() {
            if !truth.contains(&y) {
                continue;
            }
            self.balanced.push(BalancedRow {
                method: method.to_string(),
                study: study.to_string(),
                split,
                contrast: name.clone(),
                balanced_accuracy: balanced_accuracy(pred, truth, y)?,
            });
        }
        Ok(())
    }

    pub fn scores(&self, method: &str) -> BTreeMap<ScoreKey, f64> {
        self.accuracy
            .iter()
            .filter(|r| r.method == method)
            .map(|r| ((r.study.clone(), r.split), r.accuracy))
            .collect()
    }

    pub fn methods(&self) -> Vec<String> {
        let mut m: Vec<String> = Vec::new();
        for r in &self.accuracy {
            if !m.contains(&r.method) {
                m.push(r.method.clone());
            }
        }
        m
    }

    /// Computes gains of every other method against `baseline`.
    pub fn summarize_against(&mut self, baseline: &str) -> Result<()> {
        let base = self.scores(baseline);
        self.gains.clear();
        for m in self.methods() {
            if m == baseline {
                continue;
            }
            let s = gain_summary(&self.scores(&m), &base)?;
            self.gains.push((m, baseline.to_string(), s));
        }
        Ok(())
    }

    pub fn accuracy_csv(&self) -> String {
        let mut out = String::from("method,study,split,accuracy\n");
        for r in &self.accuracy {
            let _ = writeln!(out, "{},{},{},{:.10}", r.method, r.study, r.split, r.accuracy);
        }
        out
    }

    pub fn balanced_csv(&self) -> String {
        let mut out = String::from("method,study,split,contrast,balanced_accuracy\n");
        for r in &self.balanced {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.10}",
                r.method, r.study, r.split, r.contrast, r.balanced_accuracy
            );
        }
        out
    }

    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        for m in self.methods() {
            let s: Vec<f64> = self.scores(&m).values().copied().collect();
            let mean = s.iter().sum::<f64>() / s.len().max(1) as f64;
            let _ = writeln!(out, "{m}: mean accuracy {mean:.4} over {} study x split pairs", s.len());
        }
        for (m, b, g) in &self.gains {
            let _ = writeln!(
                out,
                "{m} vs {b}: mean gain {:+.4}, median {:+.4} [q25 {:+.4}, q75 {:+.4}], net increase {:.1}% (n = {})",
                g.mean,
                g.median,
                g.q25,
                g.q75,
                100.0 * g.fraction_positive,
                g.n
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keyed(values: &[f64]) -> BTreeMap<ScoreKey, f64> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| ((format!("s{}", i % 3), i), v))
            .collect()
    }

    #[test]
    fn accuracy_basics() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        let truth = [0, 1, 2, 3, 0, 1, 2, 3];
        let shifted: Vec<usize> = truth.iter().map(|y| (y + 1) % 4).collect();
        assert_eq!(accuracy(&shifted, &truth).unwrap(), 0.0);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn majority_constant_predictor() {
        let truth = [2, 2, 1, 2, 0, 2, 1];
        assert_eq!(accuracy(&[2; 7], &truth).unwrap(), 4.0 / 7.0);
    }

    #[test]
    fn balanced_accuracy_perfect_and_absent() {
        let truth = [0, 1, 2, 1];
        assert_eq!(balanced_accuracy(&truth, &truth, 1).unwrap(), 1.0);
        assert!(balanced_accuracy(&truth, &truth, 5).is_err());
    }

    #[test]
    fn balanced_accuracy_ignores_relabeling_of_other_classes() {
        let truth = [0, 1, 2, 3, 0, 1, 2, 3, 1];
        let pred = [0, 2, 2, 1, 3, 1, 0, 3, 1];
        let swap = |v: usize| match v {
            2 => 3,
            3 => 2,
            v => v,
        };
        let t2: Vec<usize> = truth.iter().map(|&v| swap(v)).collect();
        let p2: Vec<usize> = pred.iter().map(|&v| swap(v)).collect();
        assert_eq!(
            balanced_accuracy(&pred, &truth, 1).unwrap(),
            balanced_accuracy(&p2, &t2, 1).unwrap()
        );
    }

    #[test]
    fn constant_gain() {
        let base = keyed(&[0.5, 0.6, 0.7, 0.2]);
        let scores: BTreeMap<_, _> = base.iter().map(|(k, v)| (k.clone(), v + 0.05)).collect();
        let g = gain_summary(&scores, &base).unwrap();
        assert!((g.median - 0.05).abs() < 1e-12 && (g.mean - 0.05).abs() < 1e-12);
        assert_eq!(g.fraction_positive, 1.0);
    }

    #[test]
    fn antisymmetric_gain() {
        let base = keyed(&[0.5, 0.5, 0.5, 0.5]);
        let scores = keyed(&[0.6, 0.4, 0.6, 0.4]);
        let g = gain_summary(&scores, &base).unwrap();
        assert!(g.median.abs() < 1e-12 && g.mean.abs() < 1e-12);
    }

    #[test]
    fn self_gain_is_zero() {
        let x = keyed(&[0.1, 0.9, 0.3]);
        let g = gain_summary(&x, &x).unwrap();
        assert_eq!((g.mean, g.median, g.q25, g.q75, g.fraction_positive), (0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn mismatched_keys_rejected() {
        let a = keyed(&[0.1, 0.2]);
        let mut b = keyed(&[0.1, 0.2]);
        let first = b.keys().next().unwrap().clone();
        let v = b.remove(&first).unwrap();
        b.insert(("other".into(), 99), v);
        assert!(gain_summary(&a, &b).is_err());
    }
}
