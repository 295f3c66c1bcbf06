//! SGD training of the toy head on synthetic scenes, and validation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{
    fixed_threshold_label, match_candidates, mutual_label, AssignmentError, Candidate,
    GroundTruth,
};
use crate::eval::{average_recall, evaluate, EvalReport};
use crate::geometry::iou;
use crate::losses::{mlc_total, LossError};
use crate::model::{backward, forward, sgd_step, HeadParams};
use crate::postprocess::{
    divergence_metric, grouped_divergence, nms, nms_per_class, ranking_key, Detection, NmsConfig,
    NmsMode,
};
use crate::sim::config::{BaselineMode, ConfigError, SceneConfig, TrainConfig};
use crate::sim::scene::{Scene, SceneError};
use crate::sim::{scene_rng, streams, train_scenes, val_scenes};

pub const DIVERGENCE_POPULATION: &str = "pre-NMS candidates matched to a ground-truth object (ignored band included); \
confidence is the NMS ranking key on the object's class, IoU is between the predicted box and the object; \
pooled across images";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("epoch {epoch}, step {step}: {source}")]
    Loss {
        epoch: usize,
        step: usize,
        source: LossError,
    },
    #[error("epoch {epoch}, step {step}: {source}")]
    Assignment {
        epoch: usize,
        step: usize,
        source: AssignmentError,
    },
    #[error("epoch {epoch}, step {step}: non-finite {what}")]
    NonFinite {
        epoch: usize,
        step: usize,
        what: &'static str,
    },
}

impl TrainError {
    pub fn is_numerical(&self) -> bool {
        matches!(self, TrainError::NonFinite { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    FixedThreshold,
    MutualLabeling,
}

/// Held-out metrics for one set of parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Detection metrics. `ar_at_k` holds recall of class-agnostic proposals.
    pub eval: EvalReport,
    /// Mean of the per-object Spearman coefficients.
    pub divergence_per_object: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub steps: usize,
    pub l_cls: f64,
    pub l_loc: f64,
    pub l_iur: f64,
    pub total: f64,
    /// Objects whose cls / loc positive set needed the rescue rule.
    pub rescued_cls: usize,
    pub rescued_loc: usize,
    /// Smallest per-object positive set seen in the epoch.
    pub min_pos_cls: Option<usize>,
    pub min_pos_loc: Option<usize>,
    pub val_ap: Option<f64>,
    pub val_divergence: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: HeadParams,
    pub log: Vec<EpochLog>,
    pub validation: ValidationReport,
}

/// Initial parameters: all zero except a negative classification bias so
/// that background dominates from the first step.
pub fn initial_params(num_classes: usize, feature_dim: usize) -> HeadParams {
    let mut p = HeadParams::zeros(num_classes, feature_dim);
    let prior: f64 = 0.05;
    p.b_cls.iter_mut().for_each(|b| *b = (prior / (1.0 - prior)).ln());
    p
}

/// Run the head over every prior of a scene.
pub fn predict(params: &HeadParams, scene: &Scene) -> Vec<Candidate> {
    scene
        .priors
        .iter()
        .zip(&scene.features)
        .enumerate()
        .map(|(i, (prior, f))| {
            let out = forward(params, f, prior);
            Candidate {
                id: i,
                prior: *prior,
                class_scores: out.scores,
                bbox: out.bbox,
                iou_pred: out.iou_pred,
                matched_object: None,
                origin: crate::assignment::Origin::Negative,
            }
        })
        .collect()
}

fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let drops = cfg.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count();
    cfg.lr * cfg.lr_drop_factor.powi(drops as i32)
}

fn phase_at(cfg: &TrainConfig, epoch: usize) -> Phase {
    if cfg.baseline_mode == BaselineMode::MutualLabeling && epoch > cfg.mlc_enable_epoch {
        Phase::MutualLabeling
    } else {
        Phase::FixedThreshold
    }
}

#[derive(Default)]
struct EpochStats {
    steps: usize,
    l_cls: f64,
    l_loc: f64,
    l_iur: f64,
    total: f64,
    rescued_cls: usize,
    rescued_loc: usize,
    min_pos_cls: Option<usize>,
    min_pos_loc: Option<usize>,
}

fn min_group_positives(positives: &[usize], cands: &[Candidate], num_gts: usize) -> Option<usize> {
    let mut counts = vec![0usize; num_gts];
    for &j in positives {
        if let Some(k) = cands[j].matched_object {
            counts[k] += 1;
        }
    }
    let present: Vec<usize> = cands.iter().filter_map(|c| c.matched_object).collect();
    (0..num_gts)
        .filter(|k| present.contains(k))
        .map(|k| counts[k])
        .min()
}

fn fold_min(acc: Option<usize>, v: Option<usize>) -> Option<usize> {
    match (acc, v) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    }
}

/// Loss and parameter gradient for one scene.
fn scene_gradient(
    params: &HeadParams,
    scene: &Scene,
    cfg: &TrainConfig,
    phase: Phase,
    stats: &mut EpochStats,
    grad: &mut HeadParams,
    at: (usize, usize),
) -> Result<(), TrainError> {
    let (epoch, step) = at;
    let mut cands = predict(params, scene);
    let broken = |c: &Candidate| {
        c.bbox.is_degenerate()
            || !c.bbox.to_array().iter().all(|v| v.is_finite())
            || !c.iou_pred.is_finite()
            || !c.class_scores.iter().all(|v| v.is_finite())
    };
    if cands.iter().any(broken) {
        return Err(TrainError::NonFinite { epoch, step, what: "predictions" });
    }
    let grouping = match_candidates(&cands, &scene.gts, &cfg.assignment);
    grouping.annotate(&mut cands);
    let assignment = match phase {
        Phase::FixedThreshold => fixed_threshold_label(&grouping, scene.gts.len()),
        Phase::MutualLabeling => mutual_label(&grouping, &cands, &scene.gts, &cfg.assignment)
            .map_err(|source| TrainError::Assignment { epoch, step, source })?,
    };
    let loss = mlc_total(&cands, &scene.gts, &assignment, &cfg.losses)
        .map_err(|source| TrainError::Loss { epoch, step, source })?;
    if !loss.total.is_finite() {
        return Err(TrainError::NonFinite { epoch, step, what: "loss" });
    }
    stats.l_cls += loss.l_cls;
    stats.l_loc += loss.l_loc;
    stats.l_iur += loss.l_iur;
    stats.total += loss.total;
    stats.rescued_cls += assignment.rescued_cls.len();
    stats.rescued_loc += assignment.rescued_loc.len();
    let n = scene.gts.len();
    stats.min_pos_cls = fold_min(stats.min_pos_cls, min_group_positives(&assignment.pos_cls, &cands, n));
    stats.min_pos_loc = fold_min(stats.min_pos_loc, min_group_positives(&assignment.pos_loc, &cands, n));
    for (f, g) in scene.features.iter().zip(&loss.grads) {
        backward(f, g, grad);
    }
    Ok(())
}

/// Train on pre-generated scenes. `val` is evaluated after every epoch when
/// `validate_every_epoch` is set and always after the last one.
pub fn train_on(
    scfg: &SceneConfig,
    tcfg: &TrainConfig,
    train_set: &[Scene],
    val_set: &[Scene],
) -> Result<TrainOutcome, TrainError> {
    let mut params = initial_params(scfg.num_classes, scfg.feature_dim);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(tcfg.epochs);
    let mut step = 0usize;
    let mut last_val = None;

    for epoch in 1..=tcfg.epochs {
        let lr = lr_at(tcfg, epoch);
        let phase = phase_at(tcfg, epoch);
        order.shuffle(&mut scene_rng(scfg.seed, streams::SHUFFLE + epoch as u64));
        let mut stats = EpochStats::default();

        for batch in order.chunks(tcfg.batch_size) {
            step += 1;
            let mut grad = HeadParams::zeros(scfg.num_classes, scfg.feature_dim);
            for &i in batch {
                scene_gradient(&params, &train_set[i], tcfg, phase, &mut stats, &mut grad, (epoch, step))?;
                stats.steps += 1;
            }
            grad.scale(1.0 / batch.len() as f64);
            if !grad.is_finite() {
                return Err(TrainError::NonFinite { epoch, step, what: "gradient" });
            }
            params = sgd_step(&params, &grad, lr);
            if !params.is_finite() {
                return Err(TrainError::NonFinite { epoch, step, what: "parameters" });
            }
        }

        let val = if tcfg.validate_every_epoch || epoch == tcfg.epochs {
            Some(validate(&params, val_set, scfg, tcfg, tcfg.nms.mode, None))
        } else {
            None
        };
        let denom = stats.steps.max(1) as f64;
        log.push(EpochLog {
            epoch,
            phase,
            lr,
            steps: stats.steps,
            l_cls: stats.l_cls / denom,
            l_loc: stats.l_loc / denom,
            l_iur: stats.l_iur / denom,
            total: stats.total / denom,
            rescued_cls: stats.rescued_cls,
            rescued_loc: stats.rescued_loc,
            min_pos_cls: stats.min_pos_cls,
            min_pos_loc: stats.min_pos_loc,
            val_ap: val.as_ref().map(|v| v.eval.ap),
            val_divergence: val.as_ref().and_then(|v| v.eval.divergence),
        });
        if val.is_some() {
            last_val = val;
        }
    }

    Ok(TrainOutcome {
        params,
        log,
        validation: last_val.expect("the last epoch always validates"),
    })
}

/// Generate the train and validation sets from `scfg.seed` and train.
pub fn train(scfg: &SceneConfig, tcfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    scfg.validate()?;
    tcfg.validate()?;
    let train_set = train_scenes(scfg, tcfg.train_scenes)?;
    let val_set = val_scenes(scfg, tcfg.val_scenes)?;
    train_on(scfg, tcfg, &train_set, &val_set)
}

/// Per-prior predictions for one scene with optional noise on the IoU
/// prediction, clamped to `[0, 1]`.
fn scene_predictions(
    params: &HeadParams,
    scene: &Scene,
    seed: u64,
    iou_noise: Option<f64>,
) -> Vec<Candidate> {
    let mut cands = predict(params, scene);
    if let Some(sigma) = iou_noise.filter(|s| *s > 0.0) {
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        let mut rng = scene_rng(seed, streams::IOU_NOISE + scene.image_id as u64);
        for c in &mut cands {
            c.iou_pred = (c.iou_pred + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    cands
}

/// Class-specific detections: one per prior and class whose confidence
/// reaches `score_threshold`. Ids are `prior * C + class`.
pub fn detections(scene: &Scene, cands: &[Candidate], score_threshold: f64) -> Vec<Detection> {
    let mut out = Vec::new();
    for c in cands {
        let num_classes = c.class_scores.len();
        for (k, &s) in c.class_scores.iter().enumerate() {
            if s >= score_threshold {
                out.push(Detection {
                    id: c.id * num_classes + k,
                    image_id: scene.image_id,
                    class: k,
                    bbox: c.bbox,
                    score: s,
                    raw_conf: s,
                    iou_pred: Some(c.iou_pred),
                });
            }
        }
    }
    out
}

/// Class-agnostic proposals: one per prior, confidence the best class score.
fn proposals(scene: &Scene, cands: &[Candidate]) -> Vec<Detection> {
    cands
        .iter()
        .map(|c| {
            let s = c.class_scores.iter().copied().fold(0.0, f64::max);
            Detection {
                id: c.id,
                image_id: scene.image_id,
                class: 0,
                bbox: c.bbox,
                score: s,
                raw_conf: s,
                iou_pred: Some(c.iou_pred),
            }
        })
        .collect()
}

/// Evaluate `params` on `scenes` with the given NMS mode.
pub fn validate(
    params: &HeadParams,
    scenes: &[Scene],
    scfg: &SceneConfig,
    tcfg: &TrainConfig,
    mode: NmsMode,
    iou_noise: Option<f64>,
) -> ValidationReport {
    use rayon::prelude::*;
    let nms_cfg = NmsConfig { mode, ..tcfg.nms };
    let max_k = tcfg.eval.ar_limits.iter().copied().max().unwrap_or(0);
    let proposal_cfg = NmsConfig { max_out: max_k.max(1), ..nms_cfg };

    struct PerScene {
        dets: Vec<Detection>,
        props: Vec<Detection>,
        groups: Vec<Vec<(f64, f64)>>,
    }
    let per_scene: Vec<PerScene> = scenes
        .par_iter()
        .map(|scene| {
            let mut cands = scene_predictions(params, scene, scfg.seed, iou_noise);
            let grouping = match_candidates(&cands, &scene.gts, &tcfg.assignment);
            grouping.annotate(&mut cands);
            let groups = grouping
                .groups
                .iter()
                .map(|(&k, members)| {
                    let gt = &scene.gts[k];
                    members
                        .iter()
                        .map(|&j| {
                            let c = &cands[j];
                            let as_det = Detection {
                                id: c.id,
                                image_id: scene.image_id,
                                class: gt.label,
                                bbox: c.bbox,
                                score: c.class_scores[gt.label],
                                raw_conf: c.class_scores[gt.label],
                                iou_pred: Some(c.iou_pred),
                            };
                            (ranking_key(&as_det, mode), iou(&c.bbox, &gt.bbox))
                        })
                        .collect()
                })
                .collect();
            let dets = nms_per_class(&detections(scene, &cands, tcfg.score_threshold), &nms_cfg);
            let props = nms(&proposals(scene, &cands), &proposal_cfg);
            PerScene { dets, props, groups }
        })
        .collect();

    let gts: BTreeMap<usize, Vec<GroundTruth>> =
        scenes.iter().map(|s| (s.image_id, s.gts.clone())).collect();
    let dets: Vec<Detection> = per_scene.iter().flat_map(|p| p.dets.iter().cloned()).collect();
    let props: Vec<Detection> = per_scene.iter().flat_map(|p| p.props.iter().cloned()).collect();
    let mut eval = evaluate(&dets, &gts, &tcfg.eval);
    eval.ar_at_k = tcfg
        .eval
        .ar_limits
        .iter()
        .map(|&k| (k.to_string(), average_recall(&props, &gts, k, &tcfg.eval)))
        .collect();

    let groups: Vec<&[(f64, f64)]> = per_scene
        .iter()
        .flat_map(|p| p.groups.iter().map(Vec::as_slice))
        .collect();
    let pooled: Vec<(f64, f64)> = groups.iter().flat_map(|g| g.iter().copied()).collect();
    match divergence_metric(&pooled) {
        Ok(d) => {
            eval.divergence = Some(d.rho);
            eval.divergence_degenerate = d.degenerate;
        }
        Err(_) => eval.divergence = None,
    }
    eval.divergence_population = DIVERGENCE_POPULATION.to_string();

    ValidationReport {
        eval,
        divergence_per_object: grouped_divergence(groups),
    }
}
