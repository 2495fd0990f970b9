//! Training-free adjoining-room indicator.
//!
//! A frame's *disarray* mixes the temporal entropy of every subcarrier with
//! its mean absolute deviation; occupied rooms fluctuate more and score
//! lower. Per-case means of the labeled disarray, shifted by the
//! labeled/unlabeled *disparity*, give one reference value per case, and the
//! distance of a batch's disarray to those references yields a confidence
//! distribution in `[-1, 1]`.

use serde::{Deserialize, Serialize};

use crate::csi_sim::{CaseId, NUM_CASES};
use crate::error::{BtsError, Result};
use crate::preprocess::FrameSet;

/// Floor added to every sample before the entropy normalization.
pub const ENTROPY_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisarrayParams {
    /// Fine-step weight of the deviation term.
    pub alpha: f64,
    /// Fine-order exponent of the deviation term.
    pub beta: f64,
}

impl Default for DisarrayParams {
    fn default() -> Self {
        DisarrayParams { alpha: 1.0, beta: 1.0 }
    }
}

impl DisarrayParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.beta > 0.0) {
            return Err(BtsError::Config(format!(
                "disarray needs alpha >= 0 and beta > 0, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Disarray of one `(tau, S, K)` frame.
pub fn disarray(frame: &[f64], (tau, subcarriers, pairs): (usize, usize, usize), params: DisarrayParams) -> f64 {
    let width = subcarriers * pairs;
    debug_assert_eq!(frame.len(), tau * width);
    let mut sum = vec![0.0; width];
    let mut sum_floored = vec![0.0; width];
    for row in frame.chunks_exact(width) {
        for j in 0..width {
            sum[j] += row[j];
            sum_floored[j] += row[j] + ENTROPY_FLOOR;
        }
    }
    let inv_tau = 1.0 / tau as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s * inv_tau).collect();
    let mut entropy = vec![0.0; width];
    let mut deviation = vec![0.0; width];
    let unit_order = params.beta == 1.0;
    for row in frame.chunks_exact(width) {
        for j in 0..width {
            let p = (row[j] + ENTROPY_FLOOR) / sum_floored[j];
            entropy[j] -= p * p.ln();
            let d = (row[j] - mean[j]).abs();
            deviation[j] += if unit_order { d } else { d.powf(params.beta) };
        }
    }
    let mut rho = 1.0;
    for k in 0..pairs {
        let mut acc = 0.0;
        for s in 0..subcarriers {
            let j = s * pairs + k;
            acc += entropy[j] - params.alpha * inv_tau * deviation[j];
        }
        rho *= acc / subcarriers as f64;
    }
    rho
}

/// Disarray of every frame in `set`.
pub fn disarray_all(set: &FrameSet, params: DisarrayParams) -> Vec<f64> {
    (0..set.len()).map(|i| disarray(set.values(i), set.dims(), params)).collect()
}

/// Mean labeled disarray minus mean unlabeled disarray.
pub fn disparity(labeled: &[f64], unlabeled: &[f64]) -> Result<f64> {
    if labeled.is_empty() {
        return Err(BtsError::Empty("disparity needs labeled disarray values"));
    }
    if unlabeled.is_empty() {
        return Err(BtsError::Empty("disparity needs unlabeled disarray values"));
    }
    Ok(mean(labeled) - mean(unlabeled))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndicatorSet {
    /// One reference disarray per case, case 1 first.
    pub gamma: Vec<f64>,
    pub delta: f64,
    pub labeled_count: usize,
    pub unlabeled_count: usize,
    pub per_case_count: Vec<usize>,
}

impl IndicatorSet {
    /// Build from per-frame disarray values. Case 1 gets its labeled mean;
    /// every other case gets its labeled mean plus the disparity.
    pub fn from_disarray(labeled: &[(CaseId, f64)], unlabeled: &[f64]) -> Result<Self> {
        let mut sums = [0.0; NUM_CASES];
        let mut counts = [0usize; NUM_CASES];
        for (case, rho) in labeled {
            sums[case.index()] += rho;
            counts[case.index()] += 1;
        }
        let missing: Vec<u8> = CaseId::ALL
            .iter()
            .filter(|c| counts[c.index()] == 0)
            .map(|c| c.get())
            .collect();
        if !missing.is_empty() {
            return Err(BtsError::MissingCases(missing));
        }
        let all: Vec<f64> = labeled.iter().map(|(_, r)| *r).collect();
        let delta = disparity(&all, unlabeled)?;
        let gamma = CaseId::ALL
            .iter()
            .map(|c| {
                let m = sums[c.index()] / counts[c.index()] as f64;
                if *c == CaseId::EMPTY {
                    m
                } else {
                    m + delta
                }
            })
            .collect();
        Ok(IndicatorSet {
            gamma,
            delta,
            labeled_count: labeled.len(),
            unlabeled_count: unlabeled.len(),
            per_case_count: counts.to_vec(),
        })
    }
}

/// Indicators from a labeled frame set (every frame must carry a label) and
/// an unlabeled one.
pub fn build_indicators(labeled: &FrameSet, unlabeled: &FrameSet, params: DisarrayParams) -> Result<IndicatorSet> {
    params.validate()?;
    let rho_l = disarray_all(labeled, params);
    let rho_u = disarray_all(unlabeled, params);
    let tagged = labeled_pairs(labeled, &rho_l)?;
    IndicatorSet::from_disarray(&tagged, &rho_u)
}

/// As [`build_indicators`] with the disarray values already computed.
pub fn build_indicators_from(labeled: &FrameSet, rho_labeled: &[f64], rho_unlabeled: &[f64]) -> Result<IndicatorSet> {
    let tagged = labeled_pairs(labeled, rho_labeled)?;
    IndicatorSet::from_disarray(&tagged, rho_unlabeled)
}

pub(crate) fn labeled_pairs(set: &FrameSet, rho: &[f64]) -> Result<Vec<(CaseId, f64)>> {
    set.refs()
        .iter()
        .zip(rho)
        .map(|(r, &v)| {
            r.label
                .map(|c| (c, v))
                .ok_or_else(|| BtsError::Config("labeled frame without a case label".into()))
        })
        .collect()
}

/// Confidence distribution for a batch whose disarray is `rho`: raw scores
/// `-(rho - gamma_c)^2` rescaled so the largest maps to 1 and the smallest
/// to -1. All-equal scores give all zeros.
pub fn confidence_from_rho(rho: f64, indicators: &IndicatorSet) -> Vec<f64> {
    let raw: Vec<f64> = indicators.gamma.iter().map(|g| -(rho - g) * (rho - g)).collect();
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(hi > lo) {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|r| 2.0 * (r - lo) / (hi - lo) - 1.0).collect()
}

/// Batch-level confidence distribution: the batch disarray is the mean of the
/// per-frame disarray values.
pub fn confidence_distribution(batch_rho: &[f64], indicators: &IndicatorSet) -> Result<Vec<f64>> {
    if batch_rho.is_empty() {
        return Err(BtsError::Empty("confidence distribution of an empty batch"));
    }
    Ok(confidence_from_rho(mean(batch_rho), indicators))
}

/// Argmax of the confidence distribution; ties go to the lowest case id.
pub fn classify_rho(rho: f64, indicators: &IndicatorSet) -> CaseId {
    let xi = confidence_from_rho(rho, indicators);
    let mut best = 0;
    for (i, v) in xi.iter().enumerate() {
        if *v > xi[best] {
            best = i;
        }
    }
    CaseId::from_index(best)
}

pub fn indicator_classify(
    frame: &[f64],
    dims: (usize, usize, usize),
    indicators: &IndicatorSet,
    params: DisarrayParams,
) -> CaseId {
    classify_rho(disarray(frame, dims, params), indicators)
}

/// Fraction of labeled frames in `set` the indicator classifies correctly.
pub fn indicator_accuracy(set: &FrameSet, indicators: &IndicatorSet, params: DisarrayParams) -> f64 {
    let mut hits = 0;
    let mut total = 0;
    for i in 0..set.len() {
        if let Some(truth) = set.label(i) {
            total += 1;
            if indicator_classify(set.values(i), set.dims(), indicators, params) == truth {
                hits += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}
