//! Classification, localization and IoU-prediction losses with gradients
//! with respect to the head outputs (class logits, box deltas, IoU logit).
//!
//! Each term is a weighted mean over its sample set. The per-candidate
//! gradients in [`OutputGrad`] are chained into parameter gradients by
//! [`crate::model::backward`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{AssignmentResult, Candidate, GroundTruth};
use crate::geometry::{decode_jacobian, encode, iou, iou_grad_wrt_first};

/// Probability clamp applied before the log in binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossTerm {
    Cls,
    Loc,
    Iur,
}

impl std::fmt::Display for LossTerm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossTerm::Cls => "classification",
            LossTerm::Loc => "localization",
            LossTerm::Iur => "iou-rescoring",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("{0} loss has an empty sample set")]
    EmptySet(LossTerm),
    #[error("{term} loss: candidate {candidate} has no valid matched object")]
    Unmatched { term: LossTerm, candidate: usize },
    #[error("{term} loss: candidate {candidate} has a degenerate prior or box")]
    Degenerate { term: LossTerm, candidate: usize },
    #[error("{term} loss: target class {class} out of range for candidate {candidate}")]
    BadClass {
        term: LossTerm,
        candidate: usize,
        class: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LocLoss {
    SmoothL1 { beta: f64 },
    Iou,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    pub loc_loss: LocLoss,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            loc_loss: LocLoss::SmoothL1 { beta: 1.0 },
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(format!("gamma must be finite and >= 0, got {}", self.gamma));
        }
        if let LocLoss::SmoothL1 { beta } = self.loc_loss {
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(format!("smooth-l1 beta must be > 0, got {beta}"));
            }
        }
        Ok(())
    }
}

/// Gradient of a loss with respect to one candidate's head outputs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OutputGrad {
    pub cls_logits: Vec<f64>,
    pub delta: [f64; 4],
    pub iou_logit: f64,
}

impl OutputGrad {
    fn zeros(num_classes: usize) -> Self {
        Self {
            cls_logits: vec![0.0; num_classes],
            ..Default::default()
        }
    }

    fn add_scaled(&mut self, other: &OutputGrad, s: f64) {
        for (a, b) in self.cls_logits.iter_mut().zip(&other.cls_logits) {
            *a += s * b;
        }
        for k in 0..4 {
            self.delta[k] += s * other.delta[k];
        }
        self.iou_logit += s * other.iou_logit;
    }
}

/// A loss value together with per-candidate output gradients (one entry per
/// candidate in the input slice; untouched candidates have zero gradient).
#[derive(Debug, Clone, PartialEq)]
pub struct TermLoss {
    pub value: f64,
    pub grads: Vec<OutputGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_loc: f64,
    pub l_iur: f64,
    pub total: f64,
    pub grads: Vec<OutputGrad>,
}

/// One classification sample: `target = Some(class)` is a positive for that
/// class, `None` is negative for every class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClsSample {
    pub index: usize,
    pub target: Option<usize>,
}

fn num_classes(cands: &[Candidate]) -> usize {
    cands.first().map_or(0, |c| c.class_scores.len())
}

fn zero_grads(cands: &[Candidate]) -> Vec<OutputGrad> {
    vec![OutputGrad::zeros(num_classes(cands)); cands.len()]
}

/// Weighted mean of per-class binary cross-entropy.
pub fn cls_loss(
    cands: &[Candidate],
    samples: &[ClsSample],
    weights: &[f64],
) -> Result<TermLoss, LossError> {
    if samples.is_empty() {
        return Err(LossError::EmptySet(LossTerm::Cls));
    }
    let norm = 1.0 / samples.len() as f64;
    let mut grads = zero_grads(cands);
    let mut value = 0.0;
    for s in samples {
        let c = &cands[s.index];
        if let Some(t) = s.target {
            if t >= c.class_scores.len() {
                return Err(LossError::BadClass {
                    term: LossTerm::Cls,
                    candidate: c.id,
                    class: t,
                });
            }
        }
        let w = weights[s.index] * norm;
        for (k, &p) in c.class_scores.iter().enumerate() {
            let target = if s.target == Some(k) { 1.0 } else { 0.0 };
            let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            value -= w * (target * pc.ln() + (1.0 - target) * (1.0 - pc).ln());
            if pc == p {
                grads[s.index].cls_logits[k] += w * (p - target);
            }
        }
    }
    Ok(TermLoss { value, grads })
}

fn smooth_l1(r: f64, beta: f64) -> (f64, f64) {
    if r.abs() < beta {
        (0.5 * r * r / beta, r / beta)
    } else {
        (r.abs() - 0.5 * beta, r.signum())
    }
}

fn matched_gt<'a>(
    c: &Candidate,
    gts: &'a [GroundTruth],
    term: LossTerm,
) -> Result<&'a GroundTruth, LossError> {
    c.matched_object
        .and_then(|k| gts.get(k))
        .ok_or(LossError::Unmatched {
            term,
            candidate: c.id,
        })
}

pub fn loc_loss(
    cands: &[Candidate],
    gts: &[GroundTruth],
    set: &[usize],
    weights: &[f64],
    cfg: &LossConfig,
) -> Result<TermLoss, LossError> {
    if set.is_empty() {
        return Err(LossError::EmptySet(LossTerm::Loc));
    }
    let norm = 1.0 / set.len() as f64;
    let mut grads = zero_grads(cands);
    let mut value = 0.0;
    for &j in set {
        let c = &cands[j];
        let gt = matched_gt(c, gts, LossTerm::Loc)?;
        let degenerate = || LossError::Degenerate {
            term: LossTerm::Loc,
            candidate: c.id,
        };
        let pred = encode(&c.prior, &c.bbox).map_err(|_| degenerate())?;
        let w = weights[j] * norm;
        match cfg.loc_loss {
            LocLoss::SmoothL1 { beta } => {
                let target = encode(&c.prior, &gt.bbox).map_err(|_| degenerate())?;
                let (p, t) = (pred.to_array(), target.to_array());
                for k in 0..4 {
                    let (l, g) = smooth_l1(p[k] - t[k], beta);
                    value += w * l;
                    grads[j].delta[k] += w * g;
                }
            }
            LocLoss::Iou => {
                value += w * (1.0 - iou(&c.bbox, &gt.bbox));
                let d_box = iou_grad_wrt_first(&c.bbox, &gt.bbox);
                let jac = decode_jacobian(&c.prior, &pred);
                for k in 0..4 {
                    let dk: f64 = (0..4).map(|r| d_box[r] * jac[r][k]).sum();
                    grads[j].delta[k] -= w * dk;
                }
            }
        }
    }
    Ok(TermLoss { value, grads })
}

/// Mean squared error between predicted IoU and the (detached) IoU of the
/// predicted box with its matched object.
pub fn iur_loss(
    cands: &[Candidate],
    gts: &[GroundTruth],
    set: &[usize],
) -> Result<TermLoss, LossError> {
    if set.is_empty() {
        return Err(LossError::EmptySet(LossTerm::Iur));
    }
    let norm = 1.0 / set.len() as f64;
    let mut grads = zero_grads(cands);
    let mut value = 0.0;
    for &j in set {
        let c = &cands[j];
        let gt = matched_gt(c, gts, LossTerm::Iur)?;
        let target = iou(&c.bbox, &gt.bbox);
        let r = c.iou_pred - target;
        value += norm * r * r;
        grads[j].iou_logit += norm * 2.0 * r * c.iou_pred * (1.0 - c.iou_pred);
    }
    Ok(TermLoss { value, grads })
}

fn sorted_union(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut v: Vec<usize> = a.iter().chain(b).copied().collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Classification samples for a labeling: cls positives carry their object's
/// label, cls negatives and background are negative for every class.
pub fn cls_samples(
    cands: &[Candidate],
    gts: &[GroundTruth],
    assignment: &AssignmentResult,
) -> Result<Vec<ClsSample>, LossError> {
    let mut samples = Vec::with_capacity(
        assignment.pos_cls.len() + assignment.neg_cls.len() + assignment.background.len(),
    );
    for &j in &assignment.pos_cls {
        let gt = matched_gt(&cands[j], gts, LossTerm::Cls)?;
        samples.push(ClsSample {
            index: j,
            target: Some(gt.label),
        });
    }
    for &j in assignment.neg_cls.iter().chain(&assignment.background) {
        samples.push(ClsSample {
            index: j,
            target: None,
        });
    }
    samples.sort_by_key(|s| s.index);
    Ok(samples)
}

/// `L_cls(A+cls ∪ A-cls ∪ A-) + L_loc(A+loc) + gamma * L_iur(A+cls ∪ A+loc)`.
///
/// The IoU term is skipped entirely when `gamma == 0`.
pub fn mlc_total(
    cands: &[Candidate],
    gts: &[GroundTruth],
    assignment: &AssignmentResult,
    cfg: &LossConfig,
) -> Result<LossBreakdown, LossError> {
    let samples = cls_samples(cands, gts, assignment)?;
    let cls = cls_loss(cands, &samples, &assignment.w_cls)?;
    let loc = loc_loss(cands, gts, &assignment.pos_loc, &assignment.w_loc, cfg)?;

    let mut grads = cls.grads;
    for (g, l) in grads.iter_mut().zip(&loc.grads) {
        g.add_scaled(l, 1.0);
    }

    let l_iur = if cfg.gamma > 0.0 {
        let set = sorted_union(&assignment.pos_cls, &assignment.pos_loc);
        let iur = iur_loss(cands, gts, &set)?;
        for (g, l) in grads.iter_mut().zip(&iur.grads) {
            g.add_scaled(l, cfg.gamma);
        }
        iur.value
    } else {
        0.0
    };

    Ok(LossBreakdown {
        l_cls: cls.value,
        l_loc: loc.value,
        l_iur,
        total: cls.value + loc.value + cfg.gamma * l_iur,
        grads,
    })
}
