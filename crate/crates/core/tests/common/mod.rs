//! Brute-force reference implementations and seeded instance generators
//! shared by the oracle tests and the acceptance runner.

#![allow(dead_code)]

use std::collections::BTreeMap;

use mlc_core::assignment::{
    fixed_threshold_label, match_candidates, mutual_label, AssignmentConfig, Candidate,
    GroundTruth, Matcher, Origin,
};
use mlc_core::geometry::{iou, BBox};
use mlc_core::losses::{mlc_total, LocLoss, LossConfig};
use mlc_core::model::{backward, HeadParams};
use mlc_core::postprocess::{Detection, NmsConfig, NmsMode};
use mlc_core::sim::scene::generate_scene;
use mlc_core::sim::train::predict;
use mlc_core::sim::{scene_rng, SceneConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    scene_rng(seed, 0xACCE_97)
}

// ---------------------------------------------------------------- Otsu

/// Between-class variance of the cut `{v <= t} | {v > t}` computed from the
/// two partitions directly.
pub fn between_class_variance(values: &[f64], t: f64) -> f64 {
    let lo: Vec<f64> = values.iter().copied().filter(|&v| v <= t).collect();
    let hi: Vec<f64> = values.iter().copied().filter(|&v| v > t).collect();
    if lo.is_empty() || hi.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let w0 = lo.len() as f64 / n;
    let w1 = hi.len() as f64 / n;
    let m0 = lo.iter().sum::<f64>() / lo.len() as f64;
    let m1 = hi.iter().sum::<f64>() / hi.len() as f64;
    w0 * w1 * (m0 - m1) * (m0 - m1)
}

/// Exhaustive Otsu: every sample value is tried as a cut; maxima within
/// `1e-12` of the total variance count as ties and go to the smallest cut.
pub fn brute_otsu(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let total_var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let scores: Vec<(f64, f64)> = values
        .iter()
        .map(|&t| (t, between_class_variance(values, t)))
        .collect();
    let best = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    scores
        .iter()
        .filter(|s| s.1 >= best - 1e-12 * total_var)
        .map(|s| s.0)
        .fold(f64::INFINITY, f64::min)
}

/// Random score set of size 2..=64; half the sets are quantized to force
/// duplicate values and variance ties.
pub fn random_scores(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.random_range(2..=64);
    let levels = [0usize, 3, 10, 20];
    let q = levels[rng.random_range(0..levels.len())];
    (0..n)
        .map(|_| {
            let v: f64 = rng.random();
            if q == 0 {
                v
            } else {
                (v * q as f64).round() / q as f64
            }
        })
        .collect()
}

// ------------------------------------------------------------------ NMS

fn key(d: &Detection, mode: NmsMode) -> f64 {
    let p = d.iou_pred.unwrap_or(1.0);
    match mode {
        NmsMode::Standard => d.raw_conf,
        NmsMode::Rescored => d.raw_conf * p,
        NmsMode::IouNms => p,
    }
}

/// Textbook NMS: repeatedly take the best remaining detection and delete
/// everything overlapping it.
pub fn brute_nms(dets: &[Detection], cfg: &NmsConfig) -> Vec<Detection> {
    let mut remaining: Vec<Detection> = dets.to_vec();
    let mut out = Vec::new();
    while !remaining.is_empty() && out.len() < cfg.max_out {
        let mut best = 0;
        for i in 1..remaining.len() {
            let (ki, kb) = (key(&remaining[i], cfg.mode), key(&remaining[best], cfg.mode));
            if ki > kb || (ki == kb && remaining[i].id < remaining[best].id) {
                best = i;
            }
        }
        let top = remaining.remove(best);
        let (cluster, rest): (Vec<Detection>, Vec<Detection>) = remaining
            .into_iter()
            .partition(|d| iou(&top.bbox, &d.bbox) >= cfg.iou_threshold);
        remaining = rest;
        let mut kept = top.clone();
        kept.score = match cfg.mode {
            NmsMode::IouNms => cluster.iter().map(|d| d.raw_conf).fold(top.raw_conf, f64::max),
            _ => key(&top, cfg.mode),
        };
        out.push(kept);
    }
    out
}

fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> BBox {
    let w = rng.random_range(2.0..extent / 2.0);
    let h = rng.random_range(2.0..extent / 2.0);
    let x = rng.random_range(0.0..extent - w);
    let y = rng.random_range(0.0..extent - h);
    BBox::new(x, y, x + w, y + h).unwrap()
}

/// Up to 20 clustered detections; scores are drawn from a small grid so
/// ties occur often.
pub fn random_nms_set(rng: &mut ChaCha8Rng) -> (Vec<Detection>, NmsConfig) {
    let n = rng.random_range(0..=20);
    let centers: Vec<BBox> = (0..3).map(|_| random_box(rng, 40.0)).collect();
    let dets = (0..n)
        .map(|i| {
            let c = centers[rng.random_range(0..centers.len())];
            let j = |rng: &mut ChaCha8Rng| rng.random_range(-3.0..3.0);
            let (dx1, dy1, dx2, dy2) = (j(rng), j(rng), j(rng), j(rng));
            let bbox = BBox::new(
                c.x1 + dx1,
                c.y1 + dy1,
                (c.x2 + dx2).max(c.x1 + dx1 + 0.5),
                (c.y2 + dy2).max(c.y1 + dy1 + 0.5),
            )
            .unwrap();
            let conf = (rng.random_range(0..=10) as f64) / 10.0;
            let iou_pred = if rng.random_bool(0.1) {
                None
            } else {
                Some((rng.random_range(0..=10) as f64) / 10.0)
            };
            Detection {
                id: i * 7 % 23,
                image_id: 0,
                class: 0,
                bbox,
                score: conf,
                raw_conf: conf,
                iou_pred,
            }
        })
        .collect();
    let cfg = NmsConfig {
        iou_threshold: [0.3, 0.5, 0.7][rng.random_range(0..3)],
        mode: NmsMode::ALL[rng.random_range(0..3)],
        max_out: rng.random_range(1..=25),
    };
    (dets, cfg)
}

// -------------------------------------------------------------- AP / AR

pub struct TinyScene {
    pub dets: Vec<Detection>,
    pub gts: BTreeMap<usize, Vec<GroundTruth>>,
}

/// Up to 10 detections and 5 objects over 1-3 images and 2 classes.
pub fn random_tiny_scene(rng: &mut ChaCha8Rng) -> TinyScene {
    let images = rng.random_range(1..=3);
    let n_gt = rng.random_range(0..=5);
    let n_det = rng.random_range(0..=10);
    let mut gts: BTreeMap<usize, Vec<GroundTruth>> = (0..images).map(|i| (i, Vec::new())).collect();
    let mut all = Vec::new();
    for id in 0..n_gt {
        let img = rng.random_range(0..images);
        let g = GroundTruth {
            id,
            bbox: random_box(rng, 30.0),
            label: rng.random_range(0..2),
        };
        gts.get_mut(&img).unwrap().push(g);
        all.push((img, g));
    }
    let dets = (0..n_det)
        .map(|id| {
            let (image_id, class, bbox) = if !all.is_empty() && rng.random_bool(0.7) {
                let (img, g) = all[rng.random_range(0..all.len())];
                let j = |rng: &mut ChaCha8Rng| rng.random_range(-2.5..2.5);
                let b = &g.bbox;
                let (x1, y1) = (b.x1 + j(rng), b.y1 + j(rng));
                let bbox = BBox::new(x1, y1, (b.x2 + j(rng)).max(x1 + 0.5), (b.y2 + j(rng)).max(y1 + 0.5)).unwrap();
                let class = if rng.random_bool(0.85) { g.label } else { 1 - g.label };
                (img, class, bbox)
            } else {
                (rng.random_range(0..images), rng.random_range(0..2), random_box(rng, 30.0))
            };
            let score = (rng.random_range(0..=20) as f64) / 20.0;
            Detection {
                id,
                image_id,
                class,
                bbox,
                score,
                raw_conf: score,
                iou_pred: None,
            }
        })
        .collect();
    TinyScene { dets, gts }
}

fn ranked<'a>(dets: impl Iterator<Item = &'a Detection>) -> Vec<&'a Detection> {
    let mut v: Vec<&Detection> = dets.collect();
    v.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.image_id.cmp(&b.image_id))
            .then(a.id.cmp(&b.id))
    });
    v
}

/// TP flags for ranked detections: each detection claims the unclaimed
/// same-class object of its image with the highest IoU (first on ties) if
/// that IoU reaches `t`.
fn tp_flags(ranked: &[&Detection], gts: &BTreeMap<usize, Vec<GroundTruth>>, t: f64, class_aware: bool) -> Vec<bool> {
    let mut claimed: BTreeMap<(usize, usize), bool> = BTreeMap::new();
    ranked
        .iter()
        .map(|d| {
            let empty = Vec::new();
            let img_gts = gts.get(&d.image_id).unwrap_or(&empty);
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in img_gts.iter().enumerate() {
                if (class_aware && gt.label != d.class) || claimed.contains_key(&(d.image_id, g)) {
                    continue;
                }
                let v = iou(&d.bbox, &gt.bbox);
                if best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, v)) if v >= t => {
                    claimed.insert((d.image_id, g), true);
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Interpolated AP: at each of `points` evenly spaced recall levels take the
/// best precision among ranks whose recall reaches the level.
pub fn brute_ap_class(flags: &[bool], n_gt: usize, points: usize) -> Option<f64> {
    if n_gt == 0 {
        return if flags.is_empty() { None } else { Some(0.0) };
    }
    let pr: Vec<(f64, f64)> = (0..flags.len())
        .map(|i| {
            let tp = flags[..=i].iter().filter(|&&f| f).count() as f64;
            (tp / (i + 1) as f64, tp / n_gt as f64)
        })
        .collect();
    let mut sum = 0.0;
    for r in 0..points {
        let level = r as f64 / (points - 1) as f64;
        sum += pr
            .iter()
            .filter(|(_, rec)| *rec >= level)
            .map(|(p, _)| *p)
            .fold(0.0, f64::max);
    }
    Some(sum / points as f64)
}

pub fn brute_map(dets: &[Detection], gts: &BTreeMap<usize, Vec<GroundTruth>>, t: f64, points: usize) -> Option<f64> {
    let mut classes: Vec<usize> = gts.values().flatten().map(|g| g.label).collect();
    classes.sort_unstable();
    classes.dedup();
    let aps: Vec<f64> = classes
        .iter()
        .filter_map(|&c| {
            let r = ranked(dets.iter().filter(|d| d.class == c));
            let flags = tp_flags(&r, gts, t, true);
            let n_gt = gts.values().flatten().filter(|g| g.label == c).count();
            brute_ap_class(&flags, n_gt, points)
        })
        .collect();
    if aps.is_empty() {
        None
    } else {
        Some(aps.iter().sum::<f64>() / aps.len() as f64)
    }
}

/// Class-agnostic recall of the top-`k` detections of every image,
/// averaged over `thresholds`.
pub fn brute_ar(dets: &[Detection], gts: &BTreeMap<usize, Vec<GroundTruth>>, k: usize, thresholds: &[f64]) -> f64 {
    let n_gt: usize = gts.values().map(Vec::len).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut top: Vec<&Detection> = Vec::new();
    let mut images: Vec<usize> = dets.iter().map(|d| d.image_id).collect();
    images.sort_unstable();
    images.dedup();
    for img in images {
        top.extend(ranked(dets.iter().filter(|d| d.image_id == img)).into_iter().take(k));
    }
    let mut total = 0.0;
    for &t in thresholds {
        // Claims are per image, so rank order across images is irrelevant.
        let mut hits = 0;
        let mut per_image: BTreeMap<usize, Vec<&Detection>> = BTreeMap::new();
        for d in &top {
            per_image.entry(d.image_id).or_default().push(d);
        }
        for list in per_image.values() {
            hits += tp_flags(list, gts, t, false).into_iter().filter(|&f| f).count();
        }
        total += hits as f64 / n_gt as f64;
    }
    total / thresholds.len() as f64
}

// ------------------------------------------------------------- Spearman

/// Rank of each value as 1 + (number smaller) + (number equal - 1) / 2.
pub fn direct_ranks(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .map(|&v| {
            let less = values.iter().filter(|&&u| u < v).count() as f64;
            let equal = values.iter().filter(|&&u| u == v).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

/// Spearman coefficient from the covariance formula on average ranks.
/// `None` if either side is constant.
pub fn direct_spearman(pairs: &[(f64, f64)]) -> Option<f64> {
    let a = direct_ranks(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let b = direct_ranks(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        None
    } else {
        Some(cov / (va * vb).sqrt())
    }
}

pub fn random_pairs(rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let n = rng.random_range(2..=40);
    let q = [0.0, 5.0, 12.0][rng.random_range(0..3)];
    let draw = |rng: &mut ChaCha8Rng| {
        let v: f64 = rng.random();
        if q == 0.0 {
            v
        } else {
            (v * q).round() / q
        }
    };
    (0..n).map(|_| (draw(rng), draw(rng))).collect()
}

// ------------------------------------------------------------ gradients

pub struct GradientCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

fn gradient_scene_config() -> SceneConfig {
    SceneConfig {
        noise_sigma: 0.1,
        ..Default::default()
    }
}

/// Compare the analytic parameter gradient of the total loss with central
/// differences. Labels are frozen at the base point, and so is the IoU
/// target of the rescoring term (it is detached in the loss).
pub fn gradient_check(seed: u64, step: f64) -> GradientCheck {
    let mut rng = rng(seed);
    let scfg = gradient_scene_config();
    let scene = generate_scene(&scfg, seed as usize, &mut scene_rng(seed, 99)).unwrap();
    let mut params = HeadParams::zeros(scfg.num_classes, scfg.feature_dim);
    let flat: Vec<f64> = (0..params.num_params()).map(|_| rng.random_range(-0.15..0.15)).collect();
    params.set_flat(&flat);

    let acfg = AssignmentConfig {
        alpha: [0.0, 0.5, 2.0][rng.random_range(0..3)],
        matcher: Matcher::IouBand { low: 0.3, high: 0.5 },
        min_candidates: 1,
    };
    let lcfg = LossConfig {
        gamma: rng.random_range(0.1..2.0),
        loc_loss: if rng.random_bool(0.5) {
            LocLoss::SmoothL1 { beta: rng.random_range(0.05..1.0) }
        } else {
            LocLoss::Iou
        },
    };
    let use_mutual = rng.random_bool(0.5);

    let mut base = predict(&params, &scene);
    let grouping = match_candidates(&base, &scene.gts, &acfg);
    grouping.annotate(&mut base);
    let assignment = if use_mutual {
        mutual_label(&grouping, &base, &scene.gts, &acfg).unwrap()
    } else {
        fixed_threshold_label(&grouping, scene.gts.len())
    };
    let mut iur_set: Vec<usize> = assignment.pos_cls.iter().chain(&assignment.pos_loc).copied().collect();
    iur_set.sort_unstable();
    iur_set.dedup();
    let frozen_iou: Vec<f64> = iur_set
        .iter()
        .map(|&j| iou(&base[j].bbox, &scene.gts[base[j].matched_object.unwrap()].bbox))
        .collect();

    let loss_at = |p: &HeadParams| -> f64 {
        let mut cands: Vec<Candidate> = predict(p, &scene);
        for (c, b) in cands.iter_mut().zip(&base) {
            c.matched_object = b.matched_object;
            c.origin = b.origin;
        }
        let parts = mlc_total(&cands, &scene.gts, &assignment, &lcfg).unwrap();
        let iur: f64 = iur_set
            .iter()
            .zip(&frozen_iou)
            .map(|(&j, &t)| (cands[j].iou_pred - t).powi(2))
            .sum::<f64>()
            / iur_set.len() as f64;
        parts.l_cls + parts.l_loc + lcfg.gamma * iur
    };

    let parts = mlc_total(&base, &scene.gts, &assignment, &lcfg).unwrap();
    let mut analytic = HeadParams::zeros(scfg.num_classes, scfg.feature_dim);
    for (f, g) in scene.features.iter().zip(&parts.grads) {
        backward(f, g, &mut analytic);
    }
    let analytic = analytic.to_flat();

    let mut max_rel: f64 = 0.0;
    let mut probe = params.clone();
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        plus[i] += step;
        probe.set_flat(&plus);
        let lp = loss_at(&probe);
        let mut minus = flat.clone();
        minus[i] -= step;
        probe.set_flat(&minus);
        let lm = loss_at(&probe);
        let numeric = (lp - lm) / (2.0 * step);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        max_rel = max_rel.max((a - numeric).abs() / denom);
    }
    GradientCheck {
        max_rel_error: max_rel,
        checked: flat.len(),
    }
}

// ----------------------------------------------------------- assignment

pub struct Group {
    pub cands: Vec<Candidate>,
    pub gts: Vec<GroundTruth>,
}

/// One object with 1-12 candidates around it, all inside its group, with
/// random scores and boxes. About a third of the candidates are ignored.
pub fn random_group(rng: &mut ChaCha8Rng) -> Group {
    let gt = GroundTruth {
        id: 0,
        bbox: BBox::new(10.0, 10.0, 30.0, 30.0).unwrap(),
        label: rng.random_range(0..2),
    };
    let n = rng.random_range(1..=12);
    let quantize = rng.random_bool(0.3);
    let cands = (0..n)
        .map(|i| {
            let j = |rng: &mut ChaCha8Rng| rng.random_range(-6.0..6.0);
            let bbox = BBox::new(10.0 + j(rng), 10.0 + j(rng), 30.0 + j(rng), 30.0 + j(rng)).unwrap();
            let mut s: f64 = rng.random();
            if quantize {
                s = (s * 4.0).round() / 4.0;
            }
            let mut scores = vec![rng.random::<f64>(); 2];
            scores[gt.label] = s;
            Candidate {
                id: i,
                prior: gt.bbox,
                class_scores: scores,
                bbox,
                iou_pred: 0.5,
                matched_object: Some(0),
                origin: if rng.random_bool(0.35) { Origin::Ignored } else { Origin::CorePositive },
            }
        })
        .collect();
    Group { cands, gts: vec![gt] }
}

pub fn grouping_of(group: &Group) -> mlc_core::assignment::Grouping {
    let members = group.cands.iter().map(|c| (c.matched_object, c.origin)).collect();
    let mut groups = BTreeMap::new();
    groups.insert(0, (0..group.cands.len()).collect());
    mlc_core::assignment::Grouping {
        groups,
        background: Vec::new(),
        members,
    }
}
