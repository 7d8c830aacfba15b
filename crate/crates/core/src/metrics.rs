//! Evaluation metrics. All scores are higher-is-better.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::ProblemType;

pub const DEFAULT_K_VALUES: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    R2,
    F1,
    F1Weighted,
    RocAuc,
    RecallAtKMean,
}

impl MetricName {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::R2 => "r2",
            MetricName::F1 => "f1",
            MetricName::F1Weighted => "f1_weighted",
            MetricName::RocAuc => "roc_auc",
            MetricName::RecallAtKMean => "recall_at_k_mean",
        }
    }

    pub fn parse(s: &str) -> Option<MetricName> {
        [
            MetricName::R2,
            MetricName::F1,
            MetricName::F1Weighted,
            MetricName::RocAuc,
            MetricName::RecallAtKMean,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
    }

    /// Default metric per problem type.
    pub fn default_for(problem: ProblemType) -> MetricName {
        match problem {
            ProblemType::Binary => MetricName::F1,
            ProblemType::Multiclass => MetricName::F1Weighted,
            ProblemType::Regression => MetricName::R2,
            ProblemType::Ttm | ProblemType::Iim => MetricName::RocAuc,
            ProblemType::Itm => MetricName::RecallAtKMean,
        }
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub name: MetricName,
    pub k_values: Vec<usize>,
}

impl MetricSpec {
    pub fn new(name: MetricName) -> Self {
        MetricSpec {
            name,
            k_values: DEFAULT_K_VALUES.to_vec(),
        }
    }

    pub fn higher_is_better(&self) -> bool {
        true
    }
}

/// Named scores, serialized as a flat JSON object.
pub type ScoreReport = BTreeMap<String, f64>;

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r2(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_lengths(y.len(), yhat.len())?;
    if y.len() < 2 {
        return Err(Error::InvalidMetricInput(
            "r2 needs at least two values".into(),
        ));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::ConstantTarget);
    }
    let ss_res: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(Error::InvalidMetricInput("empty input".into()));
    }
    Ok(())
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    2.0 * p * r / (p + r)
}

/// F1 of class `positive`; 0 when there are no true positives.
pub fn f1_binary<T: PartialEq>(y: &[T], yhat: &[T], positive: &T) -> Result<f64> {
    check_lengths(y.len(), yhat.len())?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (a, b) in y.iter().zip(yhat) {
        match (a == positive, b == positive) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 {
        log::warn!("F1 has no true positives; returning 0");
    }
    Ok(f1_from_counts(tp, fp, fn_))
}

/// Per-class F1 weighted by each class's share of the true labels.
pub fn f1_weighted<T: Ord + Clone>(y: &[T], yhat: &[T]) -> Result<f64> {
    check_lengths(y.len(), yhat.len())?;
    let mut support: BTreeMap<&T, usize> = BTreeMap::new();
    for a in y {
        *support.entry(a).or_default() += 1;
    }
    let n = y.len() as f64;
    let mut total = 0.0;
    for (class, &count) in &support {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (a, b) in y.iter().zip(yhat) {
            match (a == *class, b == *class) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        total += count as f64 / n * f1_from_counts(tp, fp, fn_);
    }
    Ok(total)
}

/// Area under the ROC curve by average ranks: the probability that a random
/// positive scores above a random negative, ties counting one half.
pub fn roc_auc(y: &[bool], scores: &[f64]) -> Result<f64> {
    check_lengths(y.len(), scores.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidMetricInput("scores contain NaN".into()));
    }
    let n_pos = y.iter().filter(|&&p| p).count();
    let n_neg = y.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut idx: Vec<usize> = (0..y.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average 1-based rank of each tie group, doubled to stay integral.
    let mut pos_rank2: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let rank2 = (i + 1 + j + 1) as u64;
        for &k in &idx[i..=j] {
            if y[k] {
                pos_rank2 += rank2;
            }
        }
        i = j + 1;
    }
    let (np, nn) = (n_pos as u64, n_neg as u64);
    let u2 = pos_rank2 - np * (np + 1);
    Ok(u2 as f64 / (2 * np * nn) as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// 0-based position of `target` when the gallery is ranked by cosine
/// similarity to `query`, descending, ties by lower gallery index.
pub fn retrieval_rank(query: &[f64], gallery: &[Vec<f64>], target: usize) -> usize {
    let t = cosine(query, &gallery[target]);
    gallery
        .iter()
        .enumerate()
        .filter(|(j, g)| {
            let s = cosine(query, g);
            s > t || (s == t && *j < target)
        })
        .count()
}

/// Recall@K for each K, then their mean.
pub fn recall_at_k(
    queries: &[Vec<f64>],
    gallery: &[Vec<f64>],
    ground_truth: &[usize],
    k_values: &[usize],
) -> Result<Vec<f64>> {
    check_lengths(queries.len(), ground_truth.len())?;
    let max_k = k_values.iter().copied().max().unwrap_or(0);
    if gallery.len() < max_k {
        return Err(Error::GalleryTooSmall {
            gallery: gallery.len(),
            k: max_k,
        });
    }
    if let Some(&bad) = ground_truth.iter().find(|&&g| g >= gallery.len()) {
        return Err(Error::InvalidMetricInput(format!(
            "ground-truth index {bad} outside gallery"
        )));
    }
    let ranks: Vec<usize> = queries
        .iter()
        .zip(ground_truth)
        .map(|(q, &t)| retrieval_rank(q, gallery, t))
        .collect();
    Ok(k_values
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64)
        .collect())
}

pub fn recall_at_k_mean(
    queries: &[Vec<f64>],
    gallery: &[Vec<f64>],
    ground_truth: &[usize],
    k_values: &[usize],
) -> Result<f64> {
    if k_values.is_empty() {
        return Err(Error::InvalidMetricInput("no K values".into()));
    }
    let r = recall_at_k(queries, gallery, ground_truth, k_values)?;
    Ok(r.iter().sum::<f64>() / r.len() as f64)
}
