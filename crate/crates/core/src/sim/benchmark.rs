//! Ablation grid: mutual labeling on/off by IoU rescoring on/off, plus the
//! noisy-IoU comparison and an optional alpha sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::postprocess::NmsMode;
use crate::sim::config::{BaselineMode, ConfigFile};
use crate::sim::train::{train_on, validate, TrainError, ValidationReport};
use crate::sim::{train_scenes, val_scenes};

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub divergence: f64,
    pub divergence_per_object: f64,
    pub ar: BTreeMap<String, f64>,
}

impl Metrics {
    fn from_validation(v: &ValidationReport) -> Self {
        Self {
            ap: v.eval.ap,
            ap50: v.eval.ap50.unwrap_or(0.0),
            ap75: v.eval.ap75.unwrap_or(0.0),
            divergence: v.eval.divergence.unwrap_or(0.0),
            divergence_per_object: v.divergence_per_object.unwrap_or(0.0),
            ar: v.eval.ar_at_k.clone(),
        }
    }

    fn mean(items: &[Metrics]) -> Self {
        let n = items.len() as f64;
        let avg = |f: &dyn Fn(&Metrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        let mut ar = BTreeMap::new();
        for key in items[0].ar.keys() {
            ar.insert(key.clone(), avg(&|m| m.ar[key]));
        }
        Self {
            ap: avg(&|m| m.ap),
            ap50: avg(&|m| m.ap50),
            ap75: avg(&|m| m.ap75),
            divergence: avg(&|m| m.divergence),
            divergence_per_object: avg(&|m| m.divergence_per_object),
            ar,
        }
    }
}

/// One evaluated configuration, with per-seed and mean metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub name: String,
    pub mutual_labeling: bool,
    pub iou_rescoring: bool,
    pub nms_mode: NmsMode,
    pub iou_noise_sigma: f64,
    pub alpha: f64,
    pub per_seed: Vec<Metrics>,
    pub mean: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub schema: u32,
    pub seeds: Vec<u64>,
    /// The 2x2 grid in the order (off,off), (on,off), (off,on), (on,on).
    pub grid: Vec<Row>,
    /// Extra evaluations of grid models under other post-processing.
    pub comparisons: Vec<Row>,
    pub alpha_sweep: Vec<Row>,
    pub checks: Vec<Check>,
}

impl BenchmarkReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn grid_row(&self, ml: bool, iur: bool) -> &Row {
        self.grid
            .iter()
            .find(|r| r.mutual_labeling == ml && r.iou_rescoring == iur)
            .expect("grid has all four cells")
    }

    pub fn comparison(&self, name: &str) -> Option<&Row> {
        self.comparisons.iter().find(|r| r.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table of every row's mean metrics.
    pub fn table(&self) -> String {
        let ar_keys: Vec<String> = self
            .grid
            .first()
            .map(|r| r.mean.ar.keys().cloned().collect())
            .unwrap_or_default();
        let mut header = vec![
            "row".to_string(),
            "ML".into(),
            "IUR".into(),
            "nms".into(),
            "AP".into(),
            "AP50".into(),
            "AP75".into(),
            "rho".into(),
            "rho/obj".into(),
        ];
        header.extend(ar_keys.iter().map(|k| format!("AR@{k}")));
        let mut lines = vec![header];
        for r in self.grid.iter().chain(&self.comparisons).chain(&self.alpha_sweep) {
            let onoff = |b: bool| if b { "on" } else { "off" }.to_string();
            let mut line = vec![
                r.name.clone(),
                onoff(r.mutual_labeling),
                onoff(r.iou_rescoring),
                r.nms_mode.name().to_string(),
                format!("{:.4}", r.mean.ap),
                format!("{:.4}", r.mean.ap50),
                format!("{:.4}", r.mean.ap75),
                format!("{:.4}", r.mean.divergence),
                format!("{:.4}", r.mean.divergence_per_object),
            ];
            line.extend(ar_keys.iter().map(|k| format!("{:.4}", r.mean.ar[k])));
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for line in &lines {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        for c in &self.checks {
            let _ = writeln!(out, "[{}] {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct CellSpec {
    ml: bool,
    iur: bool,
    alpha: Option<f64>,
}

impl CellSpec {
    fn name(&self) -> String {
        let base = match (self.ml, self.iur) {
            (false, false) => "baseline",
            (true, false) => "ml",
            (false, true) => "iur",
            (true, true) => "ml+iur",
        };
        match self.alpha {
            Some(a) => format!("{base} alpha={a}"),
            None => base.to_string(),
        }
    }

    fn primary_mode(&self) -> NmsMode {
        if self.iur {
            NmsMode::Rescored
        } else {
            NmsMode::Standard
        }
    }
}

/// Evaluations of one trained cell: the primary mode plus any extras.
struct CellRun {
    primary: Metrics,
    extras: Vec<(String, NmsMode, f64, Metrics)>,
}

fn run_cell(cfg: &ConfigFile, seed: u64, spec: CellSpec) -> Result<CellRun, TrainError> {
    let scfg = crate::sim::SceneConfig { seed, ..cfg.scene.clone() };
    let mut tcfg = cfg.train.clone();
    tcfg.validate_every_epoch = false;
    tcfg.baseline_mode = if spec.ml {
        BaselineMode::MutualLabeling
    } else {
        BaselineMode::FixedThreshold
    };
    tcfg.losses.gamma = if spec.iur { cfg.benchmark.iur_gamma } else { 0.0 };
    tcfg.nms.mode = spec.primary_mode();
    if let Some(a) = spec.alpha {
        tcfg.assignment.alpha = a;
    }
    let train_set = train_scenes(&scfg, tcfg.train_scenes)?;
    let val_set = val_scenes(&scfg, tcfg.val_scenes)?;
    let outcome = train_on(&scfg, &tcfg, &train_set, &val_set)?;
    let primary = Metrics::from_validation(&outcome.validation);

    let mut extras = Vec::new();
    if spec.iur && !spec.ml && spec.alpha.is_none() {
        let sigma = cfg.benchmark.iou_noise_sigma;
        let evals = [
            ("iur standard-nms", NmsMode::Standard, 0.0),
            ("iur rescored noisy-iou", NmsMode::Rescored, sigma),
            ("iur iou-nms noisy-iou", NmsMode::IouNms, sigma),
        ];
        for (name, mode, noise) in evals {
            let v = validate(&outcome.params, &val_set, &scfg, &tcfg, mode, Some(noise));
            extras.push((name.to_string(), mode, noise, Metrics::from_validation(&v)));
        }
    }
    Ok(CellRun { primary, extras })
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn directional_checks(report: &BenchmarkReport) -> Vec<Check> {
    let base = &report.grid_row(false, false).mean;
    let ml = &report.grid_row(true, false).mean;
    let iur = &report.grid_row(false, true).mean;
    let mut checks = Vec::new();

    let d_div = ml.divergence - base.divergence;
    checks.push(check(
        "ml-raises-divergence-metric",
        d_div >= 0.05,
        format!("rho {:.4} -> {:.4} (delta {d_div:+.4}, need >= 0.05)", base.divergence, ml.divergence),
    ));
    let d_ap = ml.ap - base.ap;
    checks.push(check(
        "ml-raises-ap",
        d_ap > 0.0,
        format!("AP {:.4} -> {:.4} (delta {d_ap:+.4})", base.ap, ml.ap),
    ));

    if let Some(std_nms) = report.comparison("iur standard-nms") {
        let d = iur.ap - std_nms.mean.ap;
        checks.push(check(
            "rescored-nms-beats-standard",
            d > 0.0,
            format!("AP {:.4} (standard) -> {:.4} (rescored), delta {d:+.4}", std_nms.mean.ap, iur.ap),
        ));
    }
    if let (Some(r), Some(i)) = (
        report.comparison("iur rescored noisy-iou"),
        report.comparison("iur iou-nms noisy-iou"),
    ) {
        checks.push(check(
            "noisy-iou-nms-below-rescored",
            i.mean.ap < r.mean.ap,
            format!("AP iou-nms {:.4} vs rescored {:.4}", i.mean.ap, r.mean.ap),
        ));
    }

    let best = report
        .grid
        .iter()
        .max_by(|a, b| a.mean.ap.total_cmp(&b.mean.ap))
        .expect("non-empty grid");
    let top = report.grid_row(true, true);
    let others_below = report
        .grid
        .iter()
        .filter(|r| !(r.mutual_labeling && r.iou_rescoring))
        .all(|r| r.mean.ap < top.mean.ap);
    checks.push(check(
        "ml+iur-has-best-ap",
        others_below,
        format!("best cell {} with AP {:.4}; ml+iur AP {:.4}", best.name, best.mean.ap, top.mean.ap),
    ));

    for (k, &v) in &ml.ar {
        let b = base.ar[k];
        checks.push(check(
            &format!("ml-raises-ar@{k}"),
            v > b,
            format!("AR@{k} {b:.4} -> {v:.4}"),
        ));
    }
    checks
}

pub fn run_benchmark(cfg: &ConfigFile) -> Result<BenchmarkReport, TrainError> {
    cfg.validate()?;
    let seeds = cfg.benchmark.seeds.clone();
    let mut specs: Vec<CellSpec> = [(false, false), (true, false), (false, true), (true, true)]
        .into_iter()
        .map(|(ml, iur)| CellSpec { ml, iur, alpha: None })
        .collect();
    let grid_len = specs.len();
    specs.extend(cfg.benchmark.alpha_sweep.iter().map(|&a| CellSpec {
        ml: true,
        iur: false,
        alpha: Some(a),
    }));

    let jobs: Vec<(usize, u64)> = (0..specs.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let runs: Vec<CellRun> = jobs
        .par_iter()
        .map(|&(c, seed)| run_cell(cfg, seed, specs[c]))
        .collect::<Result<_, _>>()?;

    let n = seeds.len();
    let mut grid = Vec::new();
    let mut comparisons = Vec::new();
    let mut alpha_sweep = Vec::new();
    for (c, spec) in specs.iter().enumerate() {
        let cell_runs = &runs[c * n..(c + 1) * n];
        let per_seed: Vec<Metrics> = cell_runs.iter().map(|r| r.primary.clone()).collect();
        let row = Row {
            name: spec.name(),
            mutual_labeling: spec.ml,
            iou_rescoring: spec.iur,
            nms_mode: spec.primary_mode(),
            iou_noise_sigma: 0.0,
            alpha: spec.alpha.unwrap_or(cfg.train.assignment.alpha),
            mean: Metrics::mean(&per_seed),
            per_seed,
        };
        if c < grid_len {
            grid.push(row);
        } else {
            alpha_sweep.push(row);
        }
        let extra_count = cell_runs[0].extras.len();
        for e in 0..extra_count {
            let (name, mode, noise, _) = &cell_runs[0].extras[e];
            let per_seed: Vec<Metrics> = cell_runs.iter().map(|r| r.extras[e].3.clone()).collect();
            comparisons.push(Row {
                name: name.clone(),
                mutual_labeling: spec.ml,
                iou_rescoring: spec.iur,
                nms_mode: *mode,
                iou_noise_sigma: *noise,
                alpha: cfg.train.assignment.alpha,
                mean: Metrics::mean(&per_seed),
                per_seed,
            });
        }
    }

    let mut report = BenchmarkReport {
        schema: REPORT_SCHEMA,
        seeds,
        grid,
        comparisons,
        alpha_sweep,
        checks: Vec::new(),
    };
    report.checks = directional_checks(&report);
    Ok(report)
}
