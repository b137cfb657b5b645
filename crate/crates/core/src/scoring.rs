//! Anomaly scores, threshold selection and benchmark metrics.
//!
//! Positives are generated (or proxy) images; a sample is predicted positive
//! when its score is strictly above the threshold.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use thiserror::Error;

use crate::feature_store::{self, DatasetManifest, FeatureMatrix, Label, Role, StoreError};
use crate::model::{Model, ModelError};
use crate::trainer::to_array;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("AP undefined: need at least one positive and one negative sample")]
    ApUndefined,
    #[error("threshold selection needs both classes (got {positives} positives, {negatives} negatives)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("no samples to evaluate")]
    Empty,
    #[error("non-finite score")]
    NonFinite,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub score: f64,
    pub label: Label,
    pub dataset: String,
}

impl ScoredSample {
    pub fn new(score: f64, label: Label) -> Self {
        Self {
            score,
            label,
            dataset: String::new(),
        }
    }
}

/// Scores every row of a feature matrix.
pub fn score_features(model: &Model, features: &FeatureMatrix) -> Result<Vec<f64>, ScoreError> {
    let scores = model.score_batch(to_array(features).view())?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(ScoreError::NonFinite);
    }
    Ok(scores.to_vec())
}

fn class_counts(samples: &[ScoredSample]) -> (usize, usize) {
    let pos = samples.iter().filter(|s| s.label.is_positive()).count();
    (pos, samples.len() - pos)
}

/// Step-interpolated average precision `Σ_k (R_k − R_{k−1})·P_k`, ranking by
/// descending score with ties kept in input order.
pub fn average_precision(samples: &[ScoredSample]) -> Result<f64, ScoreError> {
    let (pos, neg) = class_counts(samples);
    if pos == 0 || neg == 0 {
        return Err(ScoreError::ApUndefined);
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[b].score.total_cmp(&samples[a].score));
    let total = pos as f64;
    let mut tp = 0usize;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if samples[i].label.is_positive() {
            tp += 1;
            let recall = tp as f64 / total;
            let precision = tp as f64 / (rank + 1) as f64;
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
    }
    Ok(ap)
}

/// Fraction of samples with `(score > threshold) == positive`.
pub fn accuracy(samples: &[ScoredSample], threshold: f64) -> Result<f64, ScoreError> {
    if samples.is_empty() {
        return Err(ScoreError::Empty);
    }
    let correct = samples
        .iter()
        .filter(|s| (s.score > threshold) == s.label.is_positive())
        .count();
    Ok(correct as f64 / samples.len() as f64)
}

/// Mean of the true-positive and true-negative rates.
pub fn balanced_accuracy(samples: &[ScoredSample], threshold: f64) -> Result<f64, ScoreError> {
    let (pos, neg) = class_counts(samples);
    if pos == 0 || neg == 0 {
        return Err(ScoreError::SingleClass {
            positives: pos,
            negatives: neg,
        });
    }
    let tp = samples
        .iter()
        .filter(|s| s.label.is_positive() && s.score > threshold)
        .count();
    let tn = samples
        .iter()
        .filter(|s| !s.label.is_positive() && s.score <= threshold)
        .count();
    Ok(rates_mean(tp, pos, tn, neg))
}

fn rates_mean(tp: usize, pos: usize, tn: usize, neg: usize) -> f64 {
    (tp as f64 / pos as f64 + tn as f64 / neg as f64) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ThresholdCriterion {
    Accuracy,
    #[default]
    Balanced,
    /// Equal error rate: minimizes `|FPR − FNR|`.
    Eer,
}

impl FromStr for ThresholdCriterion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "accuracy" => Ok(Self::Accuracy),
            "balanced" => Ok(Self::Balanced),
            "eer" => Ok(Self::Eer),
            other => Err(format!("unknown criterion {other:?} (accuracy|balanced|eer)")),
        }
    }
}

impl fmt::Display for ThresholdCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Accuracy => "accuracy",
            Self::Balanced => "balanced",
            Self::Eer => "eer",
        })
    }
}

/// Balanced-accuracy threshold; see [`pick_threshold_with`].
pub fn pick_threshold(samples: &[ScoredSample]) -> Result<f64, ScoreError> {
    pick_threshold_with(samples, ThresholdCriterion::Balanced)
}

/// Sweeps the midpoints between consecutive distinct sorted scores and returns
/// the best one under `criterion`, preferring the lowest on ties. With a single
/// distinct score value that value is returned.
pub fn pick_threshold_with(
    samples: &[ScoredSample],
    criterion: ThresholdCriterion,
) -> Result<f64, ScoreError> {
    let (pos, neg) = class_counts(samples);
    if pos == 0 || neg == 0 {
        return Err(ScoreError::SingleClass {
            positives: pos,
            negatives: neg,
        });
    }
    if samples.iter().any(|s| !s.score.is_finite()) {
        return Err(ScoreError::NonFinite);
    }
    let mut sorted: Vec<(f64, bool)> = samples
        .iter()
        .map(|s| (s.score, s.label.is_positive()))
        .collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Counts of samples at or below the current threshold.
    let mut neg_below = 0usize;
    let mut pos_below = 0usize;
    let mut best: Option<(f64, f64)> = None;
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            if sorted[i].1 {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            i += 1;
        }
        if i == sorted.len() {
            break;
        }
        let t = 0.5 * (v + sorted[i].0);
        let tp = pos - pos_below;
        let tn = neg_below;
        let merit = match criterion {
            ThresholdCriterion::Balanced => rates_mean(tp, pos, tn, neg),
            ThresholdCriterion::Accuracy => (tp + tn) as f64 / sorted.len() as f64,
            ThresholdCriterion::Eer => {
                let fpr = (neg - tn) as f64 / neg as f64;
                let fnr = pos_below as f64 / pos as f64;
                -(fpr - fnr).abs()
            }
        };
        if best.map_or(true, |(_, m)| merit > m) {
            best = Some((t, merit));
        }
    }
    Ok(best.map(|(t, _)| t).unwrap_or(sorted[0].0))
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetOutcome {
    Evaluated { ap: f64, accuracy: f64 },
    Skipped { reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetResult {
    pub name: String,
    pub n_natural: usize,
    pub n_generated: usize,
    pub outcome: DatasetOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub datasets: Vec<DatasetResult>,
    pub threshold: f64,
    /// `None` when every dataset was skipped.
    pub mean_ap: Option<f64>,
    pub mean_accuracy: Option<f64>,
}

impl EvalReport {
    pub fn from_samples(groups: Vec<(String, Vec<ScoredSample>)>, threshold: f64) -> Result<Self, ScoreError> {
        let mut datasets = Vec::with_capacity(groups.len());
        let mut aps = Vec::new();
        let mut accs = Vec::new();
        for (name, samples) in groups {
            let (pos, neg) = class_counts(&samples);
            let outcome = if pos == 0 || neg == 0 {
                DatasetOutcome::Skipped {
                    reason: "skipped: single-class".into(),
                }
            } else {
                let ap = average_precision(&samples)?;
                let acc = accuracy(&samples, threshold)?;
                aps.push(ap);
                accs.push(acc);
                DatasetOutcome::Evaluated { ap, accuracy: acc }
            };
            datasets.push(DatasetResult {
                name,
                n_natural: neg,
                n_generated: pos,
                outcome,
            });
        }
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        Ok(Self {
            datasets,
            threshold,
            mean_ap: mean(&aps),
            mean_accuracy: mean(&accs),
        })
    }

    pub fn skipped(&self) -> impl Iterator<Item = &DatasetResult> {
        self.datasets
            .iter()
            .filter(|d| matches!(d.outcome, DatasetOutcome::Skipped { .. }))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("dataset,n_natural,n_generated,ap,accuracy,threshold,status\n");
        for d in &self.datasets {
            match &d.outcome {
                DatasetOutcome::Evaluated { ap, accuracy } => {
                    let _ = writeln!(
                        s,
                        "{},{},{},{:.6},{:.6},{:.6},ok",
                        d.name, d.n_natural, d.n_generated, ap, accuracy, self.threshold
                    );
                }
                DatasetOutcome::Skipped { reason } => {
                    let _ = writeln!(
                        s,
                        "{},{},{},,,{:.6},{}",
                        d.name, d.n_natural, d.n_generated, self.threshold, reason
                    );
                }
            }
        }
        let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let _ = writeln!(
            s,
            "mean,{},{},{},{},{:.6},{}",
            self.datasets.iter().map(|d| d.n_natural).sum::<usize>(),
            self.datasets.iter().map(|d| d.n_generated).sum::<usize>(),
            fmt_opt(self.mean_ap),
            fmt_opt(self.mean_accuracy),
            self.threshold,
            if self.mean_ap.is_some() { "ok" } else { "no evaluable dataset" }
        );
        s
    }

    pub fn to_pretty(&self) -> String {
        let width = self
            .datasets
            .iter()
            .map(|d| d.name.len())
            .max()
            .unwrap_or(0)
            .max(7);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>8}  {:>8}  {:>7}  {:>7}", "dataset", "natural", "generated", "AP", "acc");
        for d in &self.datasets {
            match &d.outcome {
                DatasetOutcome::Evaluated { ap, accuracy } => {
                    let _ = writeln!(
                        s,
                        "{:<width$}  {:>8}  {:>8}  {:>6.2}%  {:>6.2}%",
                        d.name,
                        d.n_natural,
                        d.n_generated,
                        ap * 100.0,
                        accuracy * 100.0
                    );
                }
                DatasetOutcome::Skipped { reason } => {
                    let _ = writeln!(s, "{:<width$}  {:>8}  {:>8}  {reason}", d.name, d.n_natural, d.n_generated);
                }
            }
        }
        match (self.mean_ap, self.mean_accuracy) {
            (Some(ap), Some(acc)) => {
                let _ = writeln!(s, "mAP {:.2}%  mean accuracy {:.2}%  (threshold {:.6})", ap * 100.0, acc * 100.0, self.threshold);
            }
            _ => {
                let _ = writeln!(s, "no dataset had both classes");
            }
        }
        let n_skipped = self.skipped().count();
        if n_skipped > 0 {
            let _ = writeln!(s, "{n_skipped} dataset(s) excluded from the means");
        }
        s
    }
}

/// Scores every entry of `role` across `manifests`, grouped by dataset name in
/// first-appearance order.
pub fn score_manifests(
    model: &Model,
    manifests: &[DatasetManifest],
    role: Role,
) -> Result<Vec<(String, Vec<ScoredSample>)>, ScoreError> {
    let mut groups: Vec<(String, Vec<ScoredSample>)> = Vec::new();
    for manifest in manifests {
        for entry in manifest.with_role(role) {
            let features = feature_store::read_feature_file(&entry.path)?;
            let scores = score_features(model, &features)?;
            let idx = match groups.iter().position(|(n, _)| *n == entry.dataset) {
                Some(i) => i,
                None => {
                    groups.push((entry.dataset.clone(), Vec::new()));
                    groups.len() - 1
                }
            };
            groups[idx].1.extend(scores.into_iter().map(|score| ScoredSample {
                score,
                label: entry.label,
                dataset: entry.dataset.clone(),
            }));
        }
    }
    Ok(groups)
}

pub fn benchmark(model: &Model, manifests: &[DatasetManifest], threshold: f64) -> Result<EvalReport, ScoreError> {
    let groups = score_manifests(model, manifests, Role::Test)?;
    EvalReport::from_samples(groups, threshold)
}

/// `index,score` rows.
pub fn scores_csv(scores: &[f64]) -> String {
    let mut s = String::from("index,score\n");
    for (i, v) in scores.iter().enumerate() {
        let _ = writeln!(s, "{i},{v:e}");
    }
    s
}
