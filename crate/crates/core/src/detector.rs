//! Threshold calibration on ID scores and the binary ID/OOD decision rule.
//!
//! The threshold is the largest score value keeping the calibration-set true
//! positive rate at or above the target, with the inclusive comparison
//! `score >= lambda` deciding ID. The same convention backs the FPR@95
//! metric, so the detector and the metric always agree on the threshold.

use crate::{Error, Result};

/// A frozen threshold detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibratedDetector {
    pub lambda: f64,
    pub target_tpr: f64,
}

/// Binary detector output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Id,
    Ood,
}

/// Pick `lambda` as the largest observed score with
/// `count(score >= lambda) >= ceil(target_tpr * n)`: the lower empirical
/// `(1 - target_tpr)` quantile with inclusive tie-breaking.
pub fn calibrate(id_scores: &[f64], target_tpr: f64) -> Result<CalibratedDetector> {
    if id_scores.is_empty() {
        return Err(Error::EmptyInput("calibration scores"));
    }
    if !(target_tpr > 0.0 && target_tpr < 1.0) {
        return Err(Error::invalid("target_tpr", format!("must be in (0, 1), got {target_tpr}")));
    }
    if id_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("id_scores", "non-finite score"));
    }
    let n = id_scores.len();
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let required = ((target_tpr * n as f64) - 1e-9).ceil().max(1.0) as usize;
    // count(score >= sorted[n - required]) >= required, and any larger
    // distinct value keeps fewer than `required` scores at or above it.
    let idx = n - required.min(n);
    Ok(CalibratedDetector { lambda: sorted[idx], target_tpr })
}

impl CalibratedDetector {
    /// ID iff `score >= lambda`.
    pub fn decide(&self, score: f64) -> Decision {
        if score >= self.lambda {
            Decision::Id
        } else {
            Decision::Ood
        }
    }

    pub fn decide_batch(&self, scores: &[f64]) -> Vec<Decision> {
        scores.iter().map(|s| self.decide(*s)).collect()
    }

    /// Fraction of the given scores decided ID.
    pub fn id_rate(&self, scores: &[f64]) -> f64 {
        if scores.is_empty() {
            return 0.0;
        }
        let hits = scores.iter().filter(|s| self.decide(**s) == Decision::Id).count();
        hits as f64 / scores.len() as f64
    }
}
