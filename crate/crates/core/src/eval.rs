//! COCO-style average precision and class-agnostic average recall.
//!
//! AP uses a monotone precision envelope sampled at evenly spaced recall
//! points and is averaged over classes present in the ground truth, then over
//! IoU thresholds.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::assignment::GroundTruth;
use crate::geometry::iou;
use crate::postprocess::Detection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub recall_points: usize,
    pub ar_limits: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            recall_points: 101,
            ar_limits: vec![2, 5, 10],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.iou_thresholds.is_empty() {
            return Err("iou_thresholds must not be empty".into());
        }
        for w in self.iou_thresholds.windows(2) {
            if w[1] <= w[0] {
                return Err("iou_thresholds must be strictly increasing".into());
            }
        }
        if self.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err("iou_thresholds must lie in (0, 1]".into());
        }
        if self.recall_points < 2 {
            return Err("recall_points must be >= 2".into());
        }
        if self.ar_limits.iter().any(|&k| k == 0) {
            return Err("ar_limits entries must be >= 1".into());
        }
        Ok(())
    }
}

/// Stable-keyed JSON report. Threshold keys are formatted with two decimals
/// (`"0.50"`), recall limits as integers (`"10"`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_per_threshold: BTreeMap<String, f64>,
    pub ar_at_k: BTreeMap<String, f64>,
    /// Spearman rank correlation between confidence and IoU; `None` when not
    /// computed or when the population has fewer than two pairs.
    pub divergence: Option<f64>,
    pub divergence_degenerate: bool,
    pub divergence_population: String,
    pub num_images: usize,
    pub num_gts: usize,
    pub num_dets: usize,
}

pub fn threshold_key(t: f64) -> String {
    format!("{t:.2}")
}

/// Greedy matching of `dets` (already sorted by descending score) against
/// same-class ground truth of one image. Each gt is claimed at most once.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_t: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] || gt.label != d.class {
                    continue;
                }
                let v = iou(&d.bbox, &gt.bbox);
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, v)) if v >= iou_t => {
                    taken[g] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Interpolated AP from TP/FP flags in score order. `None` when there is
/// neither ground truth nor detection.
pub fn average_precision(flags: &[bool], n_gt: usize, cfg: &EvalConfig) -> Option<f64> {
    if n_gt == 0 {
        return if flags.is_empty() { None } else { Some(0.0) };
    }
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let m = cfg.recall_points;
    let mut sum = 0.0;
    let mut cursor = 0;
    for r in 0..m {
        let level = r as f64 / (m - 1) as f64;
        while cursor < recall.len() && recall[cursor] < level {
            cursor += 1;
        }
        if cursor < recall.len() {
            sum += precision[cursor];
        }
    }
    Some(sum / m as f64)
}

fn sort_by_score(dets: &mut [&Detection]) {
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.image_id.cmp(&b.image_id))
            .then(a.id.cmp(&b.id))
    });
}

/// Mean AP over classes present in `gts` for a single IoU threshold.
pub fn mean_ap_at(
    dets: &[Detection],
    gts: &BTreeMap<usize, Vec<GroundTruth>>,
    iou_t: f64,
    cfg: &EvalConfig,
) -> Option<f64> {
    let classes: BTreeSet<usize> = gts.values().flatten().map(|g| g.label).collect();
    let mut aps = Vec::new();
    for &class in &classes {
        let mut ordered: Vec<&Detection> = dets.iter().filter(|d| d.class == class).collect();
        sort_by_score(&mut ordered);
        let mut per_image: BTreeMap<usize, Vec<(usize, Detection)>> = BTreeMap::new();
        for (rank, d) in ordered.iter().enumerate() {
            per_image.entry(d.image_id).or_default().push((rank, (*d).clone()));
        }
        let mut flags = vec![false; ordered.len()];
        for (image, items) in &per_image {
            let img_gts: Vec<GroundTruth> = gts
                .get(image)
                .map(|g| g.iter().filter(|g| g.label == class).copied().collect())
                .unwrap_or_default();
            let image_dets: Vec<Detection> = items.iter().map(|(_, d)| d.clone()).collect();
            for ((rank, _), f) in items.iter().zip(match_detections(&image_dets, &img_gts, iou_t)) {
                flags[*rank] = f;
            }
        }
        let n_gt = gts.values().flatten().filter(|g| g.label == class).count();
        if let Some(ap) = average_precision(&flags, n_gt, cfg) {
            aps.push(ap);
        }
    }
    if aps.is_empty() {
        None
    } else {
        Some(aps.iter().sum::<f64>() / aps.len() as f64)
    }
}

/// Class-agnostic recall of the top-`k` detections per image, averaged over
/// the configured IoU thresholds.
pub fn average_recall(
    dets: &[Detection],
    gts: &BTreeMap<usize, Vec<GroundTruth>>,
    k: usize,
    cfg: &EvalConfig,
) -> f64 {
    let n_gt: usize = gts.values().map(Vec::len).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut per_image: BTreeMap<usize, Vec<&Detection>> = BTreeMap::new();
    for d in dets {
        per_image.entry(d.image_id).or_default().push(d);
    }
    for list in per_image.values_mut() {
        sort_by_score(list);
        list.truncate(k);
    }
    let mut total = 0.0;
    for &t in &cfg.iou_thresholds {
        let mut hit = 0usize;
        for (image, list) in &per_image {
            let Some(img_gts) = gts.get(image) else { continue };
            let mut taken = vec![false; img_gts.len()];
            for d in list {
                let mut best: Option<(usize, f64)> = None;
                for (g, gt) in img_gts.iter().enumerate() {
                    if taken[g] {
                        continue;
                    }
                    let v = iou(&d.bbox, &gt.bbox);
                    if best.is_none_or(|(_, bv)| v > bv) {
                        best = Some((g, v));
                    }
                }
                if let Some((g, v)) = best {
                    if v >= t {
                        taken[g] = true;
                        hit += 1;
                    }
                }
            }
        }
        total += hit as f64 / n_gt as f64;
    }
    total / cfg.iou_thresholds.len() as f64
}

/// Full report without divergence; callers fill the divergence fields.
pub fn evaluate(
    dets: &[Detection],
    gts: &BTreeMap<usize, Vec<GroundTruth>>,
    cfg: &EvalConfig,
) -> EvalReport {
    let mut per_threshold = BTreeMap::new();
    let mut sum = 0.0;
    let mut count = 0;
    for &t in &cfg.iou_thresholds {
        if let Some(ap) = mean_ap_at(dets, gts, t, cfg) {
            per_threshold.insert(threshold_key(t), ap);
            sum += ap;
            count += 1;
        }
    }
    let ar_at_k = cfg
        .ar_limits
        .iter()
        .map(|&k| (k.to_string(), average_recall(dets, gts, k, cfg)))
        .collect();
    let images: BTreeSet<usize> = gts.keys().copied().chain(dets.iter().map(|d| d.image_id)).collect();
    EvalReport {
        ap: if count == 0 { 0.0 } else { sum / count as f64 },
        ap50: per_threshold.get("0.50").copied(),
        ap75: per_threshold.get("0.75").copied(),
        ap_per_threshold: per_threshold,
        ar_at_k,
        divergence: None,
        divergence_degenerate: false,
        divergence_population: String::new(),
        num_images: images.len(),
        num_gts: gts.values().map(Vec::len).sum(),
        num_dets: dets.len(),
    }
}
