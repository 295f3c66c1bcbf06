//! Score fusion, greedy NMS in three ranking modes, and the rank-correlation
//! divergence metric.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, BBox};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PostprocessError {
    #[error("divergence needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("non-finite value in pair {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Tie-break key; unique within one NMS call.
    pub id: usize,
    pub image_id: usize,
    pub class: usize,
    pub bbox: BBox,
    /// Ranking quality after post-processing.
    pub score: f64,
    pub raw_conf: f64,
    pub iou_pred: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NmsMode {
    /// Rank by classification confidence.
    Standard,
    /// Rank by confidence times predicted IoU.
    Rescored,
    /// Rank by predicted IoU; survivors take the highest confidence of the
    /// cluster they suppress.
    IouNms,
}

impl NmsMode {
    pub const ALL: [NmsMode; 3] = [NmsMode::Standard, NmsMode::Rescored, NmsMode::IouNms];

    pub fn name(self) -> &'static str {
        match self {
            NmsMode::Standard => "standard",
            NmsMode::Rescored => "rescored",
            NmsMode::IouNms => "iou-nms",
        }
    }
}

impl std::str::FromStr for NmsMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NmsMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown nms mode `{s}` (expected standard, rescored or iou-nms)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmsConfig {
    pub iou_threshold: f64,
    pub mode: NmsMode,
    pub max_out: usize,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            mode: NmsMode::Standard,
            max_out: 100,
        }
    }
}

pub fn fuse_score(raw_conf: f64, iou_pred: f64) -> f64 {
    raw_conf * iou_pred
}

/// Ranking key of a detection under `mode`. A missing IoU prediction counts
/// as 1.
pub fn ranking_key(det: &Detection, mode: NmsMode) -> f64 {
    let p = det.iou_pred.unwrap_or(1.0);
    match mode {
        NmsMode::Standard => det.raw_conf,
        NmsMode::Rescored => fuse_score(det.raw_conf, p),
        NmsMode::IouNms => p,
    }
}

fn by_key_then_id(a: &(f64, &Detection), b: &(f64, &Detection)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.id.cmp(&b.1.id))
}

/// Greedy NMS over one image/class group. Output is ordered by descending
/// ranking key with ties broken by lowest id, and `score` holds the quality
/// used downstream (confidence, fused score, or cluster-max confidence).
pub fn nms(dets: &[Detection], cfg: &NmsConfig) -> Vec<Detection> {
    let mut order: Vec<(f64, &Detection)> =
        dets.iter().map(|d| (ranking_key(d, cfg.mode), d)).collect();
    order.sort_by(by_key_then_id);

    let mut suppressed = vec![false; order.len()];
    let mut out = Vec::new();
    for i in 0..order.len() {
        if out.len() >= cfg.max_out {
            break;
        }
        if suppressed[i] {
            continue;
        }
        let (key, survivor) = order[i];
        let mut cluster_conf = survivor.raw_conf;
        for j in i + 1..order.len() {
            if !suppressed[j] && iou(&survivor.bbox, &order[j].1.bbox) >= cfg.iou_threshold {
                suppressed[j] = true;
                cluster_conf = cluster_conf.max(order[j].1.raw_conf);
            }
        }
        let mut kept = survivor.clone();
        kept.score = match cfg.mode {
            NmsMode::Standard | NmsMode::Rescored => key,
            NmsMode::IouNms => cluster_conf,
        };
        out.push(kept);
    }
    out
}

/// Run [`nms`] separately for every `(image_id, class)` group, ascending by
/// group key.
pub fn nms_per_class(dets: &[Detection], cfg: &NmsConfig) -> Vec<Detection> {
    let mut groups: BTreeMap<(usize, usize), Vec<Detection>> = BTreeMap::new();
    for d in dets {
        groups.entry((d.image_id, d.class)).or_default().push(d.clone());
    }
    groups.values().flat_map(|g| nms(g, cfg)).collect()
}

/// Spearman correlation with a flag for the degenerate (constant-input) case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub rho: f64,
    pub degenerate: bool,
    pub n: usize,
}

/// Average (1-based) ranks; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = 0.5 * ((i + 1) + (j + 1)) as f64;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation between confidence and IoU over `pairs`
/// `(confidence, iou)`. Constant inputs yield `rho = 0` with the degenerate
/// flag set.
pub fn divergence_metric(pairs: &[(f64, f64)]) -> Result<Divergence, PostprocessError> {
    if pairs.len() < 2 {
        return Err(PostprocessError::TooFewPairs(pairs.len()));
    }
    if let Some(i) = pairs.iter().position(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(PostprocessError::NonFinite(i));
    }
    let conf: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ious: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let rc = average_ranks(&conf);
    let ri = average_ranks(&ious);
    Ok(match pearson(&rc, &ri) {
        Some(rho) => Divergence { rho, degenerate: false, n: pairs.len() },
        None => Divergence { rho: 0.0, degenerate: true, n: pairs.len() },
    })
}

/// Mean of per-group Spearman coefficients, skipping groups with fewer than
/// two pairs or degenerate ranks. `None` when no group qualifies.
pub fn grouped_divergence<'a, I>(groups: I) -> Option<f64>
where
    I: IntoIterator<Item = &'a [(f64, f64)]>,
{
    let rhos: Vec<f64> = groups
        .into_iter()
        .filter_map(|g| divergence_metric(g).ok())
        .filter(|d| !d.degenerate)
        .map(|d| d.rho)
        .collect();
    if rhos.is_empty() {
        None
    } else {
        Some(rhos.iter().sum::<f64>() / rhos.len() as f64)
    }
}
