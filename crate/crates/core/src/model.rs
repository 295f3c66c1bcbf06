//! Linear-sigmoid detection head: one feature vector per candidate in,
//! class scores, box deltas and a predicted IoU out.
//!
//! The IoU predictor reads the same features as the box regressor.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::geometry::{decode, BBox, BoxDelta};
use crate::losses::OutputGrad;

pub const CHECKPOINT_MAGIC: &str = "mlc-head-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Logistic function, kept strictly inside `(0, 1)` for large `|z|`.
pub fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Head parameters. Matrices are row-major (`rows x feature_dim`). The same
/// type holds gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub w_cls: Vec<f64>,
    pub b_cls: Vec<f64>,
    pub w_loc: Vec<f64>,
    pub b_loc: Vec<f64>,
    pub w_iur: Vec<f64>,
    pub b_iur: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub scores: Vec<f64>,
    pub delta: BoxDelta,
    pub bbox: BBox,
    pub iou_pred: f64,
}

fn dot(w: &[f64], f: &[f64]) -> f64 {
    w.iter().zip(f).map(|(a, b)| a * b).sum()
}

impl HeadParams {
    pub fn zeros(num_classes: usize, feature_dim: usize) -> Self {
        Self {
            num_classes,
            feature_dim,
            w_cls: vec![0.0; num_classes * feature_dim],
            b_cls: vec![0.0; num_classes],
            w_loc: vec![0.0; 4 * feature_dim],
            b_loc: vec![0.0; 4],
            w_iur: vec![0.0; feature_dim],
            b_iur: 0.0,
        }
    }

    pub fn num_params(&self) -> usize {
        (self.num_classes + 5) * (self.feature_dim + 1)
    }

    pub fn same_shape(&self, other: &HeadParams) -> bool {
        self.num_classes == other.num_classes && self.feature_dim == other.feature_dim
    }

    /// Named arrays in checkpoint order.
    pub fn arrays(&self) -> [(&'static str, &[f64]); 6] {
        [
            ("w_cls", &self.w_cls),
            ("b_cls", &self.b_cls),
            ("w_loc", &self.w_loc),
            ("b_loc", &self.b_loc),
            ("w_iur", &self.w_iur),
            ("b_iur", std::slice::from_ref(&self.b_iur)),
        ]
    }

    fn arrays_mut(&mut self) -> [&mut [f64]; 6] {
        [
            &mut self.w_cls,
            &mut self.b_cls,
            &mut self.w_loc,
            &mut self.b_loc,
            &mut self.w_iur,
            std::slice::from_mut(&mut self.b_iur),
        ]
    }

    /// All parameters flattened in checkpoint order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.arrays().iter().flat_map(|(_, a)| a.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut it = flat.iter();
        for arr in self.arrays_mut() {
            for v in arr.iter_mut() {
                *v = *it.next().unwrap();
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }

    pub fn add_assign(&mut self, other: &HeadParams) {
        for (a, b) in self.arrays_mut().into_iter().zip(other.arrays()) {
            for (x, y) in a.iter_mut().zip(b.1) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.arrays_mut() {
            a.iter_mut().for_each(|x| *x *= s);
        }
    }
}

pub fn forward(params: &HeadParams, features: &[f64], prior: &BBox) -> HeadOutput {
    let d = params.feature_dim;
    debug_assert_eq!(features.len(), d);
    let scores = (0..params.num_classes)
        .map(|k| sigmoid(dot(&params.w_cls[k * d..(k + 1) * d], features) + params.b_cls[k]))
        .collect();
    let mut raw = [0.0; 4];
    for (r, v) in raw.iter_mut().enumerate() {
        *v = dot(&params.w_loc[r * d..(r + 1) * d], features) + params.b_loc[r];
    }
    let delta = BoxDelta::from_array(raw);
    HeadOutput {
        scores,
        delta,
        bbox: decode(prior, &delta, None),
        iou_pred: sigmoid(dot(&params.w_iur, features) + params.b_iur),
    }
}

/// Accumulate the parameter gradient for one candidate into `acc`.
pub fn backward(features: &[f64], grad: &OutputGrad, acc: &mut HeadParams) {
    let d = acc.feature_dim;
    for (k, &g) in grad.cls_logits.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        for (w, f) in acc.w_cls[k * d..(k + 1) * d].iter_mut().zip(features) {
            *w += g * f;
        }
        acc.b_cls[k] += g;
    }
    for (r, &g) in grad.delta.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        for (w, f) in acc.w_loc[r * d..(r + 1) * d].iter_mut().zip(features) {
            *w += g * f;
        }
        acc.b_loc[r] += g;
    }
    if grad.iou_logit != 0.0 {
        for (w, f) in acc.w_iur.iter_mut().zip(features) {
            *w += grad.iou_logit * f;
        }
        acc.b_iur += grad.iou_logit;
    }
}

pub fn sgd_step(params: &HeadParams, grads: &HeadParams, lr: f64) -> HeadParams {
    assert!(params.same_shape(grads), "gradient shape mismatch");
    let mut out = params.clone();
    for (p, g) in out.arrays_mut().into_iter().zip(grads.arrays()) {
        for (x, y) in p.iter_mut().zip(g.1) {
            *x -= lr * y;
        }
    }
    out
}

/// Serialize as the versioned text layout:
///
/// ```text
/// mlc-head-checkpoint 1
/// num_classes <C>
/// feature_dim <D>
/// <name> <len> <v0> <v1> ...
/// ```
///
/// one line per array in the order `w_cls b_cls w_loc b_loc w_iur b_iur`.
/// Values use Rust's shortest round-trip float formatting.
pub fn write_checkpoint<W: Write>(params: &HeadParams, mut out: W) -> Result<(), ModelError> {
    let mut s = String::new();
    writeln!(s, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}").unwrap();
    writeln!(s, "num_classes {}", params.num_classes).unwrap();
    writeln!(s, "feature_dim {}", params.feature_dim).unwrap();
    for (name, arr) in params.arrays() {
        write!(s, "{name} {}", arr.len()).unwrap();
        for v in arr {
            write!(s, " {v:?}").unwrap();
        }
        s.push('\n');
    }
    out.write_all(s.as_bytes())?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(input: R) -> Result<HeadParams, ModelError> {
    let lines: Vec<String> = input.lines().collect::<Result<_, _>>()?;
    let err = |line: usize, message: String| ModelError::Parse { line: line + 1, message };
    let header = |i: usize, key: &str| -> Result<usize, ModelError> {
        let l = lines.get(i).ok_or_else(|| err(i, "unexpected end of file".into()))?;
        let mut parts = l.split_whitespace();
        if parts.next() != Some(key) {
            return Err(err(i, format!("expected `{key}`")));
        }
        parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err(i, format!("bad value for `{key}`")))
    };
    let version = header(0, CHECKPOINT_MAGIC)?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(err(0, format!("unsupported checkpoint version {version}")));
    }
    let num_classes = header(1, "num_classes")?;
    let feature_dim = header(2, "feature_dim")?;
    let mut params = HeadParams::zeros(num_classes, feature_dim);
    let names: Vec<(&str, usize)> = params.arrays().iter().map(|(n, a)| (*n, a.len())).collect();
    for (a, (arr, (name, len))) in params.arrays_mut().into_iter().zip(names).enumerate() {
        let i = 3 + a;
        let l = lines.get(i).ok_or_else(|| err(i, "unexpected end of file".into()))?;
        let mut parts = l.split_whitespace();
        if parts.next() != Some(name) {
            return Err(err(i, format!("expected array `{name}`")));
        }
        let n: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err(i, "bad array length".into()))?;
        if n != len {
            return Err(err(i, format!("`{name}` has length {n}, expected {len}")));
        }
        for (k, slot) in arr.iter_mut().enumerate() {
            *slot = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| err(i, format!("bad value #{k} in `{name}`")))?;
        }
        if parts.next().is_some() {
            return Err(err(i, format!("trailing values in `{name}`")));
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prior() -> BBox {
        BBox::new(4.0, 6.0, 20.0, 18.0).unwrap()
    }

    fn seeded_params(c: usize, d: usize) -> HeadParams {
        let mut p = HeadParams::zeros(c, d);
        let flat: Vec<f64> = (0..p.num_params())
            .map(|i| ((i as f64 * 0.7316).sin()) * 0.3)
            .collect();
        p.set_flat(&flat);
        p
    }

    #[test]
    fn zero_params_give_half_scores_and_the_prior() {
        let p = HeadParams::zeros(3, 5);
        let out = forward(&p, &[0.3, -1.0, 2.0, 0.0, 0.5], &prior());
        assert_eq!(out.scores, vec![0.5; 3]);
        assert_eq!(out.iou_pred, 0.5);
        assert_eq!(out.bbox, prior());
    }

    #[test]
    fn forward_outputs_match_finite_differences() {
        let (c, d) = (2, 4);
        let params = seeded_params(c, d);
        let f = [0.4, -0.2, 1.1, 0.7];
        // Scalarize every output with fixed random weights and check the
        // chained gradient.
        let mix = OutputGrad {
            cls_logits: vec![0.3, -0.8],
            delta: [0.5, -0.1, 0.9, 0.2],
            iou_logit: -0.6,
        };
        let scalar = |p: &HeadParams| {
            let o = forward(p, &f, &prior());
            let zs: Vec<f64> = o.scores.iter().map(|s| (s / (1.0 - s)).ln()).collect();
            let zi = (o.iou_pred / (1.0 - o.iou_pred)).ln();
            mix.cls_logits.iter().zip(&zs).map(|(a, b)| a * b).sum::<f64>()
                + mix.delta.iter().zip(o.delta.to_array()).map(|(a, b)| a * b).sum::<f64>()
                + mix.iou_logit * zi
        };
        let mut acc = HeadParams::zeros(c, d);
        backward(&f, &mix, &mut acc);
        let analytic = acc.to_flat();
        let base = params.to_flat();
        let h = 1e-5;
        for i in 0..base.len() {
            let mut p = params.clone();
            let mut v = base.clone();
            v[i] += h;
            p.set_flat(&v);
            let up = scalar(&p);
            v[i] -= 2.0 * h;
            p.set_flat(&v);
            let down = scalar(&p);
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!((fd - analytic[i]).abs() / denom < 1e-4, "param {i}: fd {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn sgd_examples() {
        let p = seeded_params(2, 3);
        let zero = HeadParams::zeros(2, 3);
        assert_eq!(sgd_step(&p, &zero, 0.1), p);
        assert_eq!(sgd_step(&p, &p, 1.0), zero);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let p = seeded_params(3, 16);
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn checkpoint_rejects_wrong_version_and_lengths() {
        let bad = "mlc-head-checkpoint 2\nnum_classes 1\nfeature_dim 1\n";
        assert!(matches!(read_checkpoint(bad.as_bytes()), Err(ModelError::Parse { line: 1, .. })));

        let p = HeadParams::zeros(1, 1);
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap().replace("w_loc 4", "w_loc 3");
        assert!(matches!(read_checkpoint(text.as_bytes()), Err(ModelError::Parse { line: 6, .. })));
    }

    #[test]
    fn outputs_stay_strictly_inside_unit_interval() {
        let mut p = HeadParams::zeros(1, 1);
        p.w_cls[0] = 100.0;
        p.w_iur[0] = -400.0;
        let out = forward(&p, &[3.0], &prior());
        assert!(out.scores[0] < 1.0 && out.scores[0] > 0.0);
        assert!(out.iou_pred > 0.0 && out.iou_pred < 1.0);
    }
}
