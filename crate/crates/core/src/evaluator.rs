//! Threshold decisions and detection metrics.
//!
//! Scores are oriented so that higher means more in-distribution. A sample
//! is accepted as ID when its score is at least the threshold λ.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Decision {
    Id,
    Ood,
}

pub fn decide(score: f64, threshold: f64) -> Decision {
    if score >= threshold {
        Decision::Id
    } else {
        Decision::Ood
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
    source_tag: String,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, source_tag: impl Into<String>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::InvalidInput("score set is empty".into()));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("score {i}")));
        }
        Ok(Self {
            scores,
            source_tag: source_tag.into(),
        })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn sorted(&self) -> Vec<f64> {
        let mut v = self.scores.clone();
        v.sort_by(f64::total_cmp);
        v
    }
}

/// Largest λ such that at least `⌈tpr·N⌉` ID scores are `≥ λ`.
pub fn threshold_at_tpr(id: &ScoreSet, tpr: f64) -> Result<f64> {
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "tpr must lie in (0, 1], got {tpr}"
        )));
    }
    let n = id.len();
    let keep = required_accepts(tpr, n);
    Ok(id.sorted()[n - keep])
}

fn required_accepts(tpr: f64, n: usize) -> usize {
    // The small slack keeps 0.95·20 from rounding up to 20.
    ((tpr * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// Percentage of `ood` scores accepted at threshold `lambda`.
pub fn fpr_at_threshold(ood: &ScoreSet, lambda: f64) -> f64 {
    let accepted = ood.scores.iter().filter(|&&s| s >= lambda).count();
    accepted as f64 / ood.len() as f64 * 100.0
}

pub fn fpr_at_tpr(id: &ScoreSet, ood: &ScoreSet, tpr: f64) -> Result<f64> {
    Ok(fpr_at_threshold(ood, threshold_at_tpr(id, tpr)?))
}

/// Twice the Mann–Whitney U statistic: 2 per ID>OOD pair, 1 per tie.
fn doubled_u(id: &ScoreSet, ood: &ScoreSet) -> u128 {
    let sorted = ood.sorted();
    id.scores
        .iter()
        .map(|&s| {
            let below = sorted.partition_point(|&o| o < s);
            let not_above = sorted.partition_point(|&o| o <= s);
            (2 * below + (not_above - below)) as u128
        })
        .sum()
}

/// Area under the ROC curve in percent, ties counted ½.
pub fn auroc(id: &ScoreSet, ood: &ScoreSet) -> f64 {
    let pairs = 2 * id.len() as u128 * ood.len() as u128;
    doubled_u(id, ood) as f64 / pairs as f64 * 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub threshold: f64,
    pub auroc_pct: f64,
    pub fpr95_pct: f64,
    pub decisions: Option<Vec<Decision>>,
}

impl DetectionReport {
    /// Metrics at the default 95% TPR operating point.
    pub fn compute(id: &ScoreSet, ood: &ScoreSet) -> Result<Self> {
        Self::at_tpr(id, ood, 0.95)
    }

    pub fn at_tpr(id: &ScoreSet, ood: &ScoreSet, tpr: f64) -> Result<Self> {
        let threshold = threshold_at_tpr(id, tpr)?;
        Ok(Self {
            threshold,
            auroc_pct: auroc(id, ood),
            fpr95_pct: fpr_at_threshold(ood, threshold),
            decisions: None,
        })
    }

    /// Attaches per-sample decisions for `scores` at this report's threshold.
    pub fn with_decisions(mut self, scores: &[f64]) -> Self {
        self.decisions = Some(scores.iter().map(|&s| decide(s, self.threshold)).collect());
        self
    }
}
