//! Detection metrics. Scores are "real" evidence: higher means more
//! likely real, and positives are real samples.

use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};

/// Area under the ROC curve via average ranks (Mann–Whitney U, ties
/// count half). `labels[i]` is true for positives.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Metric(format!("score {i} is NaN")));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(format!(
            "AUC needs both classes (got {n_pos} positive, {n_neg} negative)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));

    // Ranks are 1-based; a tie group spanning positions i..j gets (i+j+1)/2.
    // Working with doubled ranks keeps everything in integers.
    let mut pos_rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let doubled = (i + 1 + j) as u128;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        pos_rank_sum2 += doubled * pos_in_group;
        i = j;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    // 2U = 2·R_pos − p(p+1)
    let u2 = pos_rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Fraction of samples whose `sigmoid(score) ≥ 0.5` decision matches the
/// label.
pub fn accuracy(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Metric("accuracy needs equal, non-empty score and label lists".into()));
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (sigmoid(s) >= 0.5) == l)
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub tag: String,
    pub auc: f64,
    pub acc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl EvalReport {
    pub fn from_scores(tag: impl Into<String>, scores: &[f64], labels: &[bool]) -> Result<Self> {
        let n_pos = labels.iter().filter(|&&l| l).count();
        Ok(Self {
            tag: tag.into(),
            auc: auc(scores, labels)?,
            acc: accuracy(scores, labels)?,
            n_pos,
            n_neg: labels.len() - n_pos,
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.tag, self.auc, self.acc)
    }
}
