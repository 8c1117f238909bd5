//! Slide-level metrics, patient-stratified folds and the repeat bootstrap.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::slide::Bag;

/// Ties-aware rank AUC: the probability that a random positive outscores a
/// random negative, ties counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("scores and labels differ in length"));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of (1-based, tie-averaged) ranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_tie = order[i..j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += avg_rank * pos_in_tie as f64;
        i = j;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub f1: f64,
}

/// Accuracy, balanced accuracy (mean recall over the classes present) and
/// positive-class F1, predicting class 1 when `score > threshold`.
pub fn threshold_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ThresholdMetrics> {
    if scores.len() != labels.len() {
        return Err(Error::shape("scores and labels differ in length"));
    }
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("no predictions"));
    }
    let (mut tp, mut tn, mut fp, mut f_n) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s > threshold, l == 1) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => f_n += 1,
        }
    }
    let accuracy = (tp + tn) as f64 / scores.len() as f64;
    let mut recalls = Vec::with_capacity(2);
    if tp + f_n > 0 {
        recalls.push(tp as f64 / (tp + f_n) as f64);
    }
    if tn + fp > 0 {
        recalls.push(tn as f64 / (tn + fp) as f64);
    }
    let balanced_accuracy = recalls.iter().sum::<f64>() / recalls.len() as f64;
    let denom = 2 * tp + fp + f_n;
    let f1 = if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    };
    Ok(ThresholdMetrics {
        accuracy,
        balanced_accuracy,
        f1,
    })
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub f1: f64,
    pub threshold: f64,
}

impl MetricsReport {
    pub fn compute(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        let t = threshold_metrics(scores, labels, threshold)?;
        Ok(MetricsReport {
            auc: auc(scores, labels)?,
            accuracy: t.accuracy,
            balanced_accuracy: t.balanced_accuracy,
            f1: t.f1,
            threshold,
        })
    }

    fn values(&self) -> [f64; 4] {
        [self.auc, self.accuracy, self.balanced_accuracy, self.f1]
    }
}

// ---------------------------------------------------------------------------
// prediction tables

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub slide_id: String,
    pub patient_id: String,
    pub label: u8,
    /// Positive-class probability per repeat.
    pub probabilities: Vec<f64>,
}

/// Slides × repeats of positive-class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable {
    rows: Vec<PredictionRow>,
    repeats: usize,
}

impl PredictionTable {
    pub fn new(rows: Vec<PredictionRow>) -> Result<Self> {
        let repeats = rows.first().map_or(0, |r| r.probabilities.len());
        for r in &rows {
            if r.probabilities.len() != repeats {
                return Err(Error::shape("prediction rows have different repeat counts"));
            }
            if r.label > 1 {
                return Err(Error::InvalidLabel(r.label));
            }
            if r.probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::config(format!(
                    "slide {} has a probability outside [0, 1]",
                    r.slide_id
                )));
            }
        }
        Ok(PredictionTable { rows, repeats })
    }

    pub fn rows(&self) -> &[PredictionRow] {
        &self.rows
    }

    pub fn repeats(&self) -> usize {
        self.repeats
    }

    pub fn labels(&self) -> Vec<u8> {
        self.rows.iter().map(|r| r.label).collect()
    }

    pub fn column(&self, repeat: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.probabilities[repeat]).collect()
    }

    /// Per-slide mean probability over repeats.
    pub fn mean_scores(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.probabilities.iter().sum::<f64>() / r.probabilities.len() as f64)
            .collect()
    }

    /// Append another table's rows (same repeat count).
    pub fn extend(&mut self, other: PredictionTable) -> Result<()> {
        if !self.rows.is_empty() && !other.rows.is_empty() && other.repeats != self.repeats {
            return Err(Error::shape("cannot merge tables with different repeat counts"));
        }
        if self.rows.is_empty() {
            self.repeats = other.repeats;
        }
        self.rows.extend(other.rows);
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![
            "slide_id".to_string(),
            "patient_id".to_string(),
            "label".to_string(),
        ];
        header.extend((0..self.repeats).map(|r| format!("repeat_{r}")));
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![
                row.slide_id.clone(),
                row.patient_id.clone(),
                row.label.to_string(),
            ];
            rec.extend(row.probabilities.iter().map(|p| p.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let fixed = ["slide_id", "patient_id", "label"];
        if header.len() < 3 || header.iter().take(3).ne(fixed) {
            return Err(Error::config("prediction table header is malformed"));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::config(format!("bad probability {s}")))
            };
            rows.push(PredictionRow {
                slide_id: rec[0].to_string(),
                patient_id: rec[1].to_string(),
                label: rec[2]
                    .parse()
                    .map_err(|_| Error::config(format!("bad label {}", &rec[2])))?,
                probabilities: rec.iter().skip(3).map(parse).collect::<Result<_>>()?,
            });
        }
        PredictionTable::new(rows)
    }
}

// ---------------------------------------------------------------------------
// bootstrap

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub epochs: usize,
    pub auc: MeanStd,
    pub accuracy: MeanStd,
    pub balanced_accuracy: MeanStd,
    pub f1: MeanStd,
}

fn mean_std(values: &[f64]) -> MeanStd {
    // Welford: exact zero spread for constant input
    let (mut mean, mut m2) = (0.0, 0.0);
    for (i, &v) in values.iter().enumerate() {
        let d = v - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (v - mean);
    }
    MeanStd {
        mean,
        std: (m2 / values.len() as f64).sqrt(),
    }
}

/// One bootstrap epoch: each slide contributes one uniformly chosen repeat.
pub fn bootstrap_epoch(table: &PredictionTable, labels: &[u8], rng: &mut impl Rng) -> Result<[f64; 4]> {
    let scores: Vec<f64> = table
        .rows
        .iter()
        .map(|r| r.probabilities[rng.gen_range(0..table.repeats)])
        .collect();
    Ok(MetricsReport::compute(&scores, labels, DEFAULT_THRESHOLD)?.values())
}

/// Mean and (population) standard deviation of each metric over `epochs`
/// bootstrap epochs. Epoch `e` draws from its own derived stream.
pub fn bootstrap(table: &PredictionTable, epochs: usize, seed: u64) -> Result<BootstrapReport> {
    if table.rows.is_empty() || table.repeats == 0 {
        return Err(Error::config("prediction table is empty"));
    }
    if epochs == 0 {
        return Err(Error::config("bootstrap needs at least one epoch"));
    }
    let labels = table.labels();
    // fail early rather than once per epoch
    auc(&table.column(0), &labels)?;
    let values = (0..epochs)
        .into_par_iter()
        .map(|e| {
            let mut rng = seed::rng_for(seed, &["bootstrap".into(), e.into()]);
            bootstrap_epoch(table, &labels, &mut rng)
        })
        .collect::<Result<Vec<[f64; 4]>>>()?;
    let metric = |k: usize| mean_std(&values.iter().map(|v| v[k]).collect::<Vec<_>>());
    Ok(BootstrapReport {
        epochs,
        auc: metric(0),
        accuracy: metric(1),
        balanced_accuracy: metric(2),
        f1: metric(3),
    })
}

// ---------------------------------------------------------------------------
// folds

/// Fold number per patient and per bag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub n_folds: usize,
    pub patient_fold: BTreeMap<String, usize>,
    pub bag_fold: Vec<usize>,
}

/// Bag indices of one cross-validation round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deal patients into folds class by class, round-robin over a seeded
/// shuffle, continuing the deal position across classes so fold sizes
/// differ by at most one and each class is spread within one patient of
/// exact proportion.
pub fn stratified_folds(bags: &[Bag], n_folds: usize, seed: u64) -> Result<FoldAssignment> {
    if n_folds < 2 {
        return Err(Error::config("need at least two folds"));
    }
    let mut patient_label: BTreeMap<&str, u8> = BTreeMap::new();
    for b in bags {
        let l = *patient_label.entry(&b.patient_id).or_insert(b.label);
        if l != b.label {
            return Err(Error::config(format!(
                "patient {} has slides with different labels",
                b.patient_id
            )));
        }
    }
    let mut rng = seed::rng_for(seed, &["folds".into()]);
    let mut patient_fold = BTreeMap::new();
    let mut position = 0usize;
    for class in 0..=1u8 {
        let mut patients: Vec<&str> = patient_label
            .iter()
            .filter(|(_, &l)| l == class)
            .map(|(&p, _)| p)
            .collect();
        if patients.len() < n_folds {
            return Err(Error::config(format!(
                "class {class} has {} patients, need at least {n_folds}",
                patients.len()
            )));
        }
        patients.shuffle(&mut rng);
        for p in patients {
            patient_fold.insert(p.to_string(), position % n_folds);
            position += 1;
        }
    }
    let bag_fold = bags.iter().map(|b| patient_fold[&b.patient_id]).collect();
    Ok(FoldAssignment {
        n_folds,
        patient_fold,
        bag_fold,
    })
}

impl FoldAssignment {
    /// Round `i` tests on fold `i`, validates on fold `i+1`, trains on the rest.
    pub fn split(&self, round: usize) -> CvSplit {
        let test_fold = round % self.n_folds;
        let val_fold = (round + 1) % self.n_folds;
        let mut split = CvSplit {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (i, &f) in self.bag_fold.iter().enumerate() {
            if f == test_fold {
                split.test.push(i);
            } else if f == val_fold {
                split.val.push(i);
            } else {
                split.train.push(i);
            }
        }
        split
    }
}
