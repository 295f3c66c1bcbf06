//! Candidate matching, mutual labeling and ignored-sample weighting.
//!
//! Matching groups every candidate with at most one ground-truth object.
//! Mutual labeling then splits each object's group twice with Otsu: the
//! classification labels come from the IoU of the predicted boxes and the
//! localization labels come from the gt-class confidences.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, BBox};
use crate::thresholding::{otsu_values, split_values};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssignmentError {
    #[error("candidate {candidate} has {got} class scores but object {object} has label {label}")]
    MissingScore {
        candidate: usize,
        object: usize,
        label: usize,
        got: usize,
    },
    #[error("candidate {candidate} is grouped with object index {object}, which does not exist")]
    UnknownObject { candidate: usize, object: usize },
    #[error("invalid assignment config: {0}")]
    Config(String),
}

/// How a candidate entered its object's group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    CorePositive,
    Ignored,
    Negative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: usize,
    pub prior: BBox,
    pub class_scores: Vec<f64>,
    pub bbox: BBox,
    pub iou_pred: f64,
    pub matched_object: Option<usize>,
    pub origin: Origin,
}

impl Candidate {
    /// A candidate that has not been through a forward pass yet: its box is
    /// the prior and all scores are zero.
    pub fn from_prior(id: usize, prior: BBox, num_classes: usize) -> Self {
        Self {
            id,
            prior,
            class_scores: vec![0.0; num_classes],
            bbox: prior,
            iou_pred: 0.0,
            matched_object: None,
            origin: Origin::Negative,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub id: usize,
    pub bbox: BBox,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Matcher {
    /// Prior IoU `>= high` is core-positive, `[low, high)` is ignored.
    IouBand { low: f64, high: f64 },
    /// Prior center inside the box is core-positive.
    InsideBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssignmentConfig {
    pub alpha: f64,
    pub matcher: Matcher,
    /// Groups smaller than this skip the Otsu split; all members become
    /// positive for both tasks.
    pub min_candidates: usize,
}

impl Default for AssignmentConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            matcher: Matcher::IouBand { low: 0.4, high: 0.5 },
            min_candidates: 1,
        }
    }
}

impl AssignmentConfig {
    pub fn validate(&self) -> Result<(), AssignmentError> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(AssignmentError::Config(format!(
                "alpha must be a finite value >= 0, got {}",
                self.alpha
            )));
        }
        if let Matcher::IouBand { low, high } = self.matcher {
            if !(0.0 <= low && low <= high && high <= 1.0) {
                return Err(AssignmentError::Config(format!(
                    "iou band needs 0 <= low <= high <= 1, got ({low}, {high})"
                )));
            }
        }
        if self.min_candidates < 1 {
            return Err(AssignmentError::Config("min_candidates must be >= 1".into()));
        }
        Ok(())
    }
}

/// Output of [`match_candidates`]: per-object candidate groups `J^k` plus
/// the background set. Indices refer to positions in the candidate slice and
/// objects to positions in the ground-truth slice.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Grouping {
    pub groups: BTreeMap<usize, Vec<usize>>,
    pub background: Vec<usize>,
    /// Per candidate: matched object index and origin.
    pub members: Vec<(Option<usize>, Origin)>,
}

impl Grouping {
    pub fn origin(&self, cand: usize) -> Origin {
        self.members[cand].1
    }

    pub fn object_of(&self, cand: usize) -> Option<usize> {
        self.members[cand].0
    }

    pub fn core_positives(&self) -> Vec<usize> {
        self.indices_with(Origin::CorePositive)
    }

    pub fn ignored(&self) -> Vec<usize> {
        self.indices_with(Origin::Ignored)
    }

    fn indices_with(&self, origin: Origin) -> Vec<usize> {
        self.members
            .iter()
            .enumerate()
            .filter(|(_, m)| m.1 == origin)
            .map(|(i, _)| i)
            .collect()
    }

    /// Record matched object and origin on the candidates themselves.
    pub fn annotate(&self, cands: &mut [Candidate]) {
        for (c, &(obj, origin)) in cands.iter_mut().zip(&self.members) {
            c.matched_object = obj;
            c.origin = origin;
        }
    }
}

/// Result of a labeling pass. All index lists are ascending candidate
/// positions; `tau_*` are indexed by ground-truth position (`None` for objects
/// without candidates).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AssignmentResult {
    pub pos_cls: Vec<usize>,
    pub neg_cls: Vec<usize>,
    pub pos_loc: Vec<usize>,
    pub background: Vec<usize>,
    /// Matched candidates that take no part in the loss (fixed-threshold
    /// labeling drops its ignored band here). Always empty after mutual
    /// labeling.
    pub excluded: Vec<usize>,
    pub w_cls: Vec<f64>,
    pub w_loc: Vec<f64>,
    pub tau_cls: Vec<Option<f64>>,
    pub tau_loc: Vec<Option<f64>>,
    /// Objects for which the rescue rule forced a cls / loc positive.
    pub rescued_cls: Vec<usize>,
    pub rescued_loc: Vec<usize>,
}

fn smaller_gt(gts: &[GroundTruth], a: usize, b: usize) -> bool {
    let (x, y) = (&gts[a], &gts[b]);
    let (ax, ay) = (x.bbox.area(), y.bbox.area());
    ax < ay || (ax == ay && x.id < y.id)
}

pub fn match_candidates(
    cands: &[Candidate],
    gts: &[GroundTruth],
    cfg: &AssignmentConfig,
) -> Grouping {
    let mut grouping = Grouping {
        members: vec![(None, Origin::Negative); cands.len()],
        ..Default::default()
    };
    for (ci, cand) in cands.iter().enumerate() {
        let hit = match cfg.matcher {
            Matcher::IouBand { low, high } => {
                let mut best: Option<(usize, f64)> = None;
                for (gi, gt) in gts.iter().enumerate() {
                    let v = iou(&cand.prior, &gt.bbox);
                    best = match best {
                        Some((bi, bv))
                            if bv > v || (bv == v && !smaller_gt(gts, gi, bi)) =>
                        {
                            Some((bi, bv))
                        }
                        _ => Some((gi, v)),
                    };
                }
                best.and_then(|(gi, v)| {
                    if v >= high {
                        Some((gi, Origin::CorePositive))
                    } else if v >= low && v > 0.0 {
                        Some((gi, Origin::Ignored))
                    } else {
                        None
                    }
                })
            }
            Matcher::InsideBox => {
                let (cx, cy) = cand.prior.center();
                let mut best: Option<usize> = None;
                for (gi, gt) in gts.iter().enumerate() {
                    if gt.bbox.contains_point(cx, cy) {
                        best = match best {
                            Some(bi) if !smaller_gt(gts, gi, bi) => Some(bi),
                            _ => Some(gi),
                        };
                    }
                }
                best.map(|gi| (gi, Origin::CorePositive))
            }
        };
        match hit {
            Some((gi, origin)) => {
                grouping.members[ci] = (Some(gi), origin);
                grouping.groups.entry(gi).or_default().push(ci);
            }
            None => grouping.background.push(ci),
        }
    }
    grouping
}

/// Fixed-threshold labeling: core positives train both tasks, background is
/// negative, the ignored band is excluded entirely.
pub fn fixed_threshold_label(grouping: &Grouping, num_gts: usize) -> AssignmentResult {
    let n = grouping.members.len();
    let core = grouping.core_positives();
    AssignmentResult {
        pos_cls: core.clone(),
        neg_cls: Vec::new(),
        pos_loc: core,
        background: grouping.background.clone(),
        excluded: grouping.ignored(),
        w_cls: vec![1.0; n],
        w_loc: vec![1.0; n],
        tau_cls: vec![None; num_gts],
        tau_loc: vec![None; num_gts],
        rescued_cls: Vec::new(),
        rescued_loc: Vec::new(),
    }
}

/// Index into `members` of the maximum of `vals`, ties toward the lowest
/// candidate id.
fn argmax_by_id(members: &[usize], vals: &[f64], cands: &[Candidate]) -> usize {
    let mut best = 0;
    for k in 1..members.len() {
        let (v, bv) = (vals[k], vals[best]);
        if v > bv || (v == bv && cands[members[k]].id < cands[members[best]].id) {
            best = k;
        }
    }
    best
}

pub fn mutual_label(
    grouping: &Grouping,
    cands: &[Candidate],
    gts: &[GroundTruth],
    cfg: &AssignmentConfig,
) -> Result<AssignmentResult, AssignmentError> {
    let n = cands.len();
    let mut result = AssignmentResult {
        background: grouping.background.clone(),
        w_cls: vec![1.0; n],
        w_loc: vec![1.0; n],
        tau_cls: vec![None; gts.len()],
        tau_loc: vec![None; gts.len()],
        ..Default::default()
    };

    for (&k, members) in &grouping.groups {
        let gt = gts.get(k).ok_or(AssignmentError::UnknownObject {
            candidate: members[0],
            object: k,
        })?;
        let mut s_vals = Vec::with_capacity(members.len());
        let mut i_vals = Vec::with_capacity(members.len());
        for &ci in members {
            let c = &cands[ci];
            let s = *c
                .class_scores
                .get(gt.label)
                .ok_or(AssignmentError::MissingScore {
                    candidate: c.id,
                    object: gt.id,
                    label: gt.label,
                    got: c.class_scores.len(),
                })?;
            s_vals.push(s);
            i_vals.push(iou(&c.bbox, &gt.bbox));
        }

        let (tau_loc, tau_cls) = if members.len() < cfg.min_candidates {
            (0.0, 0.0)
        } else {
            (
                otsu_values(&i_vals).expect("groups are non-empty"),
                otsu_values(&s_vals).expect("groups are non-empty"),
            )
        };
        result.tau_loc[k] = Some(tau_loc);
        result.tau_cls[k] = Some(tau_cls);

        let small = members.len() < cfg.min_candidates;
        let cls_split = split_values(&i_vals, tau_loc);
        let loc_split = split_values(&s_vals, tau_cls);
        let (mut cls_pos, mut cls_neg) = if small {
            ((0..members.len()).collect(), Vec::new())
        } else {
            (cls_split.above, cls_split.below)
        };
        let mut loc_pos: Vec<usize> = if small {
            (0..members.len()).collect()
        } else {
            loc_split.above
        };

        if cls_pos.is_empty() {
            let j = argmax_by_id(members, &i_vals, cands);
            cls_pos.push(j);
            cls_neg.retain(|&x| x != j);
            result.rescued_cls.push(k);
        }
        if loc_pos.is_empty() {
            loc_pos.push(argmax_by_id(members, &s_vals, cands));
            result.rescued_loc.push(k);
        }

        result.pos_cls.extend(cls_pos.iter().map(|&j| members[j]));
        result.neg_cls.extend(cls_neg.iter().map(|&j| members[j]));
        result.pos_loc.extend(loc_pos.iter().map(|&j| members[j]));

        for (j, &ci) in members.iter().enumerate() {
            if grouping.origin(ci) == Origin::Ignored {
                result.w_cls[ci] = margin_weight(i_vals[j], tau_loc, cfg.alpha);
                result.w_loc[ci] = margin_weight(s_vals[j], tau_cls, cfg.alpha);
            }
        }
    }

    result.pos_cls.sort_unstable();
    result.neg_cls.sort_unstable();
    result.pos_loc.sort_unstable();
    Ok(result)
}

/// `|value - tau|^alpha` with `0^0 = 1`.
fn margin_weight(value: f64, tau: f64, alpha: f64) -> f64 {
    if alpha == 0.0 {
        1.0
    } else {
        (value - tau).abs().powf(alpha)
    }
}

/// Recompute the ignored-sample weights of `result` in place from its stored
/// thresholds. [`mutual_label`] already does this; the separate entry point
/// lets callers sweep `alpha` without relabeling.
pub fn ignored_weights(
    result: &mut AssignmentResult,
    grouping: &Grouping,
    cands: &[Candidate],
    gts: &[GroundTruth],
    cfg: &AssignmentConfig,
) {
    result.w_cls.iter_mut().for_each(|w| *w = 1.0);
    result.w_loc.iter_mut().for_each(|w| *w = 1.0);
    for (&k, members) in &grouping.groups {
        let (Some(tau_loc), Some(tau_cls)) = (result.tau_loc[k], result.tau_cls[k]) else {
            continue;
        };
        let gt = &gts[k];
        for &ci in members {
            if grouping.origin(ci) != Origin::Ignored {
                continue;
            }
            let c = &cands[ci];
            let s = c.class_scores.get(gt.label).copied().unwrap_or(0.0);
            result.w_cls[ci] = margin_weight(iou(&c.bbox, &gt.bbox), tau_loc, cfg.alpha);
            result.w_loc[ci] = margin_weight(s, tau_cls, cfg.alpha);
        }
    }
}
