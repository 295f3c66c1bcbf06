mod common;

use std::collections::BTreeMap;

use common::*;
use mlc_core::assignment::mutual_label;
use mlc_core::eval::{average_recall, mean_ap_at, EvalConfig};
use mlc_core::geometry::{decode, encode, iou, BBox};
use mlc_core::postprocess::{average_ranks, divergence_metric, nms};
use mlc_core::thresholding::{otsu_threshold, ScoreSet};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn otsu_matches_exhaustive_search() {
    let mut r = rng(1);
    for _ in 0..500 {
        let v = random_scores(&mut r);
        let got = otsu_threshold(&ScoreSet::new(v.clone()).unwrap());
        assert_eq!(got, brute_otsu(&v), "{v:?}");
    }
}

#[test]
fn nms_matches_textbook_loop() {
    let mut r = rng(2);
    for _ in 0..300 {
        let (dets, cfg) = random_nms_set(&mut r);
        assert_eq!(nms(&dets, &cfg), brute_nms(&dets, &cfg), "{cfg:?}");
    }
}

#[test]
fn ap_and_ar_match_direct_pr_curve() {
    let cfg = EvalConfig::default();
    let mut r = rng(3);
    for _ in 0..200 {
        let s = random_tiny_scene(&mut r);
        for &t in &cfg.iou_thresholds {
            let got = mean_ap_at(&s.dets, &s.gts, t, &cfg);
            let want = brute_map(&s.dets, &s.gts, t, cfg.recall_points);
            match (got, want) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9, "t={t}: {a} vs {b}"),
                (a, b) => assert_eq!(a, b),
            }
        }
        for &k in &cfg.ar_limits {
            let got = average_recall(&s.dets, &s.gts, k, &cfg);
            let want = brute_ar(&s.dets, &s.gts, k, &cfg.iou_thresholds);
            assert!((got - want).abs() < 1e-9, "k={k}: {got} vs {want}");
        }
    }
}

#[test]
fn hand_computed_ap_fixture() {
    // Two objects; ranked detections hit, miss, hit.
    let cfg = EvalConfig {
        iou_thresholds: vec![0.5],
        ..Default::default()
    };
    let b = |x: f64| BBox::new(x, 0.0, x + 10.0, 10.0).unwrap();
    let gts: BTreeMap<_, _> = [(
        0,
        vec![
            mlc_core::GroundTruth { id: 0, bbox: b(0.0), label: 0 },
            mlc_core::GroundTruth { id: 1, bbox: b(40.0), label: 0 },
        ],
    )]
    .into();
    let det = |id, x, s| mlc_core::Detection {
        id,
        image_id: 0,
        class: 0,
        bbox: b(x),
        score: s,
        raw_conf: s,
        iou_pred: None,
    };
    let dets = vec![det(0, 0.0, 0.9), det(1, 20.0, 0.8), det(2, 40.0, 0.7)];
    let ap = mean_ap_at(&dets, &gts, 0.5, &cfg).unwrap();
    assert!((ap - (51.0 + 50.0 * 2.0 / 3.0) / 101.0).abs() < 1e-12);
}

#[test]
fn spearman_matches_direct_formula() {
    let mut r = rng(4);
    for _ in 0..500 {
        let pairs = random_pairs(&mut r);
        let d = divergence_metric(&pairs).unwrap();
        match direct_spearman(&pairs) {
            Some(rho) => {
                assert!(!d.degenerate);
                assert!((d.rho - rho).abs() < 1e-12, "{} vs {rho}", d.rho);
            }
            None => assert!(d.degenerate && d.rho == 0.0),
        }
        let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        assert_eq!(average_ranks(&xs), direct_ranks(&xs));
    }
}

#[test]
fn analytic_gradients_match_finite_differences() {
    for seed in 0..10 {
        let g = gradient_check(seed, 1e-5);
        assert!(g.max_rel_error < 1e-4, "seed {seed}: {}", g.max_rel_error);
    }
}

#[test]
fn encode_decode_round_trip_on_random_pairs() {
    let mut r = rng(5);
    for _ in 0..1000 {
        let mut draw = || {
            let x = r.random_range(-50.0..50.0);
            let y = r.random_range(-50.0..50.0);
            BBox::new(x, y, x + r.random_range(0.5..60.0), y + r.random_range(0.5..60.0)).unwrap()
        };
        let (p, t) = (draw(), draw());
        let back = decode(&p, &encode(&p, &t).unwrap(), None);
        for (a, b) in back.to_array().iter().zip(t.to_array()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((iou(&back, &t) - 1.0).abs() < 1e-9);
    }
}

#[test]
fn mutual_labels_partition_every_group() {
    let mut r = rng(6);
    for _ in 0..300 {
        let g = random_group(&mut r);
        let grouping = grouping_of(&g);
        let cfg = mlc_core::AssignmentConfig::default();
        let res = mutual_label(&grouping, &g.cands, &g.gts, &cfg).unwrap();
        let mut all: Vec<usize> = res.pos_cls.iter().chain(&res.neg_cls).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..g.cands.len()).collect::<Vec<_>>());
        assert!(!res.pos_cls.is_empty() && !res.pos_loc.is_empty());
        assert!(res.excluded.is_empty());
    }
}

proptest! {
    #[test]
    fn otsu_oracle_on_arbitrary_sets(v in prop::collection::vec(0.0f64..=1.0, 1..40)) {
        prop_assert_eq!(otsu_threshold(&ScoreSet::new(v.clone()).unwrap()), brute_otsu(&v));
    }

    #[test]
    fn spearman_is_symmetric(pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..30)) {
        let swapped: Vec<(f64, f64)> = pairs.iter().map(|&(a, b)| (b, a)).collect();
        let a = divergence_metric(&pairs).unwrap();
        let b = divergence_metric(&swapped).unwrap();
        prop_assert!((a.rho - b.rho).abs() < 1e-12);
        prop_assert!(a.rho.abs() <= 1.0);
    }
}
