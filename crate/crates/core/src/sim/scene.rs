//! Seeded synthetic scenes: ground-truth boxes, a prior grid, and one
//! feature vector per prior.
//!
//! Feature layout for `C` classes (remaining dimensions are pure noise):
//!
//! | dims              | content                                                   |
//! |-------------------|-----------------------------------------------------------|
//! | `0..C`            | one-hot class times a bump around the discriminative point |
//! | `C`               | class-agnostic bump around the box center                 |
//! | `C+1..C+5`        | regression target of the prior, attenuated off-center      |
//! | `C+5..2C+5`       | one-hot class times a weaker center bump                   |
//!
//! The discriminative point sits `divergence_bias * diagonal` away from the
//! box center in a random direction, so classification evidence peaks off
//! center while localization evidence peaks at the center. With a zero bias
//! both peaks coincide.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::GroundTruth;
use crate::geometry::{encode, iou, BBox};
use crate::sim::config::SceneConfig;

pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("could not place object {object} after {attempts} attempts")]
    Placement { object: usize, attempts: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub image_id: usize,
    pub gts: Vec<GroundTruth>,
    /// Discriminative point of each object, parallel to `gts`.
    pub focus_points: Vec<(f64, f64)>,
    pub priors: Vec<BBox>,
    pub features: Vec<Vec<f64>>,
}

pub fn prior_grid(cfg: &SceneConfig) -> Vec<BBox> {
    let (w, h) = cfg.image_size;
    let nx = (w / cfg.prior_stride).floor() as usize;
    let ny = (h / cfg.prior_stride).floor() as usize;
    let mut priors = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let cx = (i as f64 + 0.5) * cfg.prior_stride;
            let cy = (j as f64 + 0.5) * cfg.prior_stride;
            priors.push(BBox::from_center(cx, cy, cfg.prior_size, cfg.prior_size));
        }
    }
    priors
}

fn gaussian_bump(d2: f64, width: f64) -> f64 {
    (-0.5 * d2 / (width * width)).exp()
}

/// Noise-free feature vector of `prior` given the object that owns it.
pub(crate) fn clean_features(
    cfg: &SceneConfig,
    prior: &BBox,
    owner: Option<(&GroundTruth, (f64, f64))>,
) -> Vec<f64> {
    let c = cfg.num_classes;
    let shape = &cfg.features;
    let mut f = vec![0.0; cfg.feature_dim];
    let Some((gt, focus)) = owner else {
        return f;
    };
    let (pcx, pcy) = prior.center();
    let (gcx, gcy) = gt.bbox.center();
    let (gw, gh) = (gt.bbox.width(), gt.bbox.height());
    let diag = gw.hypot(gh);

    let dfx = (pcx - focus.0) / diag;
    let dfy = (pcy - focus.1) / diag;
    f[gt.label] = gaussian_bump(dfx * dfx + dfy * dfy, shape.discriminative_width);

    let ux = (pcx - gcx) / (0.5 * gw);
    let uy = (pcy - gcy) / (0.5 * gh);
    let center = gaussian_bump(ux * ux + uy * uy, shape.center_width);
    f[c] = center;

    let reliability = gaussian_bump(ux * ux + uy * uy, shape.reliability_width);
    if let Ok(target) = encode(prior, &gt.bbox) {
        for (k, v) in target.to_array().into_iter().enumerate() {
            f[c + 1 + k] = reliability * v;
        }
    }
    f[c + 5 + gt.label] = shape.center_class_gain * center;
    f
}

/// Index of the object a prior draws its features from: highest IoU, ties
/// to the smaller object. `None` if the prior touches no object.
pub(crate) fn owner_of(prior: &BBox, gts: &[GroundTruth]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (g, gt) in gts.iter().enumerate() {
        let v = iou(prior, &gt.bbox);
        if v <= 0.0 {
            continue;
        }
        best = match best {
            Some((b, bv)) if bv > v || (bv == v && gts[b].bbox.area() <= gt.bbox.area()) => {
                Some((b, bv))
            }
            _ => Some((g, v)),
        };
    }
    best.map(|(g, _)| g)
}

/// Every object must be the owner of some prior overlapping it by at least
/// `min_iou`, so a core positive exists under an IoU-band matcher.
fn every_object_owns_a_prior(priors: &[BBox], gts: &[GroundTruth], min_iou: f64) -> bool {
    let mut covered = vec![false; gts.len()];
    for p in priors {
        if let Some(g) = owner_of(p, gts) {
            if iou(p, &gts[g].bbox) >= min_iou {
                covered[g] = true;
            }
        }
    }
    covered.into_iter().all(|c| c)
}

pub fn generate_scene(
    cfg: &SceneConfig,
    image_id: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Scene, SceneError> {
    let (w, h) = cfg.image_size;
    let (smin, smax) = cfg.object_size;
    let (nmin, nmax) = cfg.objects_per_scene;
    let priors = prior_grid(cfg);
    let count = rng.random_range(nmin..=nmax);

    let mut gts: Vec<GroundTruth> = Vec::with_capacity(count);
    let mut focus_points = Vec::with_capacity(count);
    for object in 0..count {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let bw = rng.random_range(smin..=smax);
            let bh = rng.random_range(smin..=smax);
            let x1 = rng.random_range(0.0..=(w - bw));
            let y1 = rng.random_range(0.0..=(h - bh));
            let label = rng.random_range(0..cfg.num_classes);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let bbox = BBox::from_center(x1 + 0.5 * bw, y1 + 0.5 * bh, bw, bh);
            if gts.iter().any(|g| iou(&g.bbox, &bbox) > cfg.max_gt_iou) {
                continue;
            }
            gts.push(GroundTruth { id: object, bbox, label });
            if !every_object_owns_a_prior(&priors, &gts, cfg.min_prior_iou) {
                gts.pop();
                continue;
            }
            let reach = cfg.divergence_bias * bw.hypot(bh);
            let (cx, cy) = bbox.center();
            focus_points.push((cx + reach * angle.cos(), cy + reach * angle.sin()));
            placed = true;
            break;
        }
        if !placed {
            return Err(SceneError::Placement {
                object,
                attempts: MAX_PLACEMENT_ATTEMPTS,
            });
        }
    }

    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("finite sigma");
    let features = priors
        .iter()
        .map(|p| {
            let owner = owner_of(p, &gts).map(|g| (&gts[g], focus_points[g]));
            let mut f = clean_features(cfg, p, owner);
            if cfg.noise_sigma > 0.0 {
                for v in f.iter_mut() {
                    *v += noise.sample(rng);
                }
            }
            f
        })
        .collect();

    Ok(Scene {
        image_id,
        gts,
        focus_points,
        priors,
        features,
    })
}
