//! Cross-entropy families with indicator-shifted targets, the student
//! feedback signal, and the projection-space quadratic losses.
//!
//! Functions here work on concrete arrays; the `*_node` variants record the
//! same quantities on a [`Tape`] with the target side held constant.

use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Tape, Var, PROB_FLOOR};
use crate::csi_sim::CaseId;
use crate::error::{BtsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 0.1, lambda2: 2.0, lambda3: 1.0, lambda4: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3), ("lambda4", self.lambda4)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(BtsError::Config(format!("{name} must be a finite non-negative weight, got {v}")));
            }
        }
        Ok(())
    }
}

/// Feedback of the primal and dual students, both clamped at zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeedbackSignal {
    pub primal: f64,
    pub dual: f64,
}

/// Every per-iteration loss component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub tce_pt: f64,
    pub tce_dt: f64,
    /// Teacher unlabeled loss, already multiplied by the feedback.
    pub uice_pt: f64,
    pub uice_dt: f64,
    pub uice_ps: f64,
    pub uice_ds: f64,
    pub ctq: f64,
    pub ctve: f64,
}

impl LossComponents {
    pub fn named(&self) -> [(&'static str, f64); 8] {
        [
            ("tce_pt", self.tce_pt),
            ("tce_dt", self.tce_dt),
            ("uice_pt", self.uice_pt),
            ("uice_dt", self.uice_dt),
            ("uice_ps", self.uice_ps),
            ("uice_ds", self.uice_ds),
            ("ctq", self.ctq),
            ("ctve", self.ctve),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TotalLosses {
    pub primal_teacher: f64,
    pub dual_teacher: f64,
    pub primal_student: f64,
    pub dual_student: f64,
}

pub fn total_losses(c: &LossComponents, w: &LossWeights) -> Result<TotalLosses> {
    w.validate()?;
    Ok(TotalLosses {
        primal_teacher: w.lambda1 * c.tce_pt + w.lambda2 * c.uice_pt + w.lambda3 * c.ctq + w.lambda4 * c.ctve,
        dual_teacher: w.lambda1 * c.tce_dt + w.lambda2 * c.uice_dt + w.lambda3 * c.ctq,
        primal_student: c.uice_ps,
        dual_student: c.uice_ds,
    })
}

pub fn one_hot(labels: &[CaseId], classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; labels.len() * classes];
    for (row, l) in out.chunks_exact_mut(classes).zip(labels) {
        row[l.index()] = 1.0;
    }
    out
}

/// Row-wise `softmax(base + xi)`. `xi` is either one shared row of length
/// `classes` or one row per sample.
pub fn shifted_targets(base: &[f64], xi: &[f64], classes: usize) -> Vec<f64> {
    let rows = base.len() / classes;
    assert!(xi.len() == classes || xi.len() == base.len(), "confidence shape does not match the batch");
    let mut z = base.to_vec();
    for r in 0..rows {
        let shift = if xi.len() == classes { xi } else { &xi[r * classes..(r + 1) * classes] };
        for (v, s) in z[r * classes..(r + 1) * classes].iter_mut().zip(shift) {
            *v += s;
        }
    }
    softmax_rows(&z, classes)
}

/// Mean over rows of `-sum_c target_c * ln(max(p_c, floor))`.
pub fn cross_entropy(probs: &[f64], targets: &[f64], classes: usize) -> f64 {
    assert_eq!(probs.len(), targets.len());
    let rows = probs.len() / classes;
    if rows == 0 {
        return 0.0;
    }
    let s: f64 = probs.iter().zip(targets).map(|(p, t)| -t * p.max(PROB_FLOOR).ln()).sum();
    s / rows as f64
}

/// Labeled loss with indicator-shifted one-hot targets.
pub fn tce(probs: &[f64], labels: &[CaseId], xi: &[f64], classes: usize) -> f64 {
    cross_entropy(probs, &shifted_targets(&one_hot(labels, classes), xi, classes), classes)
}

/// Student loss against the teacher's pseudo distribution.
pub fn uice_student(probs: &[f64], pseudo: &[f64], xi: &[f64], classes: usize) -> f64 {
    cross_entropy(probs, &shifted_targets(pseudo, xi, classes), classes)
}

/// Teacher unlabeled loss scaled by the student's feedback.
pub fn uice_teacher(probs: &[f64], pseudo: &[f64], xi: &[f64], feedback: f64, classes: usize) -> f64 {
    assert!(feedback >= 0.0, "feedback must be non-negative");
    if feedback == 0.0 {
        return 0.0;
    }
    feedback * uice_student(probs, pseudo, xi, classes)
}

/// Plain labeled cross entropy.
pub fn labeled_ce(probs: &[f64], labels: &[CaseId], classes: usize) -> f64 {
    cross_entropy(probs, &one_hot(labels, classes), classes)
}

/// `max(0, CE_before - CE_after)`: positive when the student's labeled
/// cross entropy dropped across its update.
pub fn compute_feedback(before: &[f64], after: &[f64], labels: &[CaseId], classes: usize) -> f64 {
    (labeled_ce(before, labels, classes) - labeled_ce(after, labels, classes)).max(0.0)
}

fn check_dim(actual: usize, expected: usize, op: &'static str) -> Result<()> {
    if actual != expected {
        return Err(BtsError::Shape { op, expected: vec![expected], actual: vec![actual] });
    }
    Ok(())
}

/// Mean over rows of the squared distance between two projection batches.
pub fn ctq(a: &[f64], b: &[f64], dim: usize) -> Result<f64> {
    check_dim(b.len(), a.len(), "ctq")?;
    if dim == 0 || a.len() % dim != 0 {
        return Err(BtsError::Shape { op: "ctq", expected: vec![dim], actual: vec![a.len()] });
    }
    let rows = a.len() / dim;
    if rows == 0 {
        return Err(BtsError::Empty("ctq batch"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / rows as f64)
}

/// Squared distance of one projection from the center.
pub fn outlier_distance(projection: &[f64], center: Option<&[f64]>) -> Result<f64> {
    let center = center.ok_or(BtsError::CenterUninitialized)?;
    check_dim(projection.len(), center.len(), "outlier_distance")?;
    Ok(projection.iter().zip(center).map(|(x, c)| (x - c) * (x - c)).sum())
}

/// Mean squared distance of a projection batch from the center.
pub fn ctve(projections: &[f64], center: Option<&[f64]>) -> Result<f64> {
    let c = center.ok_or(BtsError::CenterUninitialized)?;
    if c.is_empty() || projections.len() % c.len() != 0 || projections.is_empty() {
        return Err(BtsError::Shape { op: "ctve", expected: vec![c.len()], actual: vec![projections.len()] });
    }
    let rows = projections.len() / c.len();
    let mut s = 0.0;
    for row in projections.chunks_exact(c.len()) {
        s += outlier_distance(row, Some(c))?;
    }
    Ok(s / rows as f64)
}

/// Mean of the `(rows, dim)` projections.
pub fn init_center(projections: &[f64], dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || projections.is_empty() || projections.len() % dim != 0 {
        return Err(BtsError::Empty("no projections to average for the center"));
    }
    let rows = projections.len() / dim;
    let mut c = vec![0.0; dim];
    for row in projections.chunks_exact(dim) {
        for (a, v) in c.iter_mut().zip(row) {
            *a += v;
        }
    }
    c.iter_mut().for_each(|v| *v /= rows as f64);
    Ok(c)
}

/// Cross entropy of `logits` against constant `softmax(base + xi)` targets.
pub fn shifted_ce_node(tape: &mut Tape, logits: Var, base: &[f64], xi: &[f64], classes: usize) -> Var {
    let targets = shifted_targets(base, xi, classes);
    tape.soft_cross_entropy(logits, &targets)
}

pub fn ctq_node(tape: &mut Tape, a: Var, b: Var) -> Var {
    tape.squared_distance(a, b)
}

pub fn ctve_node(tape: &mut Tape, projections: Var, center: Option<&[f64]>) -> Result<Var> {
    let c = center.ok_or(BtsError::CenterUninitialized)?;
    Ok(tape.distance_to_point(projections, c))
}
