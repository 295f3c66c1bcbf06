use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use mlc_core::eval::{evaluate, EvalConfig};
use mlc_core::geometry::iou;
use mlc_core::model::write_checkpoint;
use mlc_core::postprocess::{divergence_metric, grouped_divergence, nms_per_class, ranking_key};
use mlc_core::sim::train::{detections, predict};
use mlc_core::sim::{run_benchmark, train_scenes, val_scenes, ConfigError, ConfigFile, TrainError};
use mlc_core::{Detection, GroundTruth, NmsConfig, NmsMode};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::dump::{self, DetectionDumpRecord, DumpError, GroundTruthDumpRecord};
use crate::Split;

pub const SEED_ENV: &str = "MLC_SEED";

pub const DUMP_POPULATION: &str = "pre-NMS detections paired with the same-class ground-truth object \
of highest IoU (IoU > 0, ties to the earlier object); confidence is the ranking key of the NMS mode; \
pooled across images";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DumpError> for CliError {
    fn from(e: DumpError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Scene(_) => CliError::Config(e.to_string()),
            e if e.is_numerical() => CliError::Numerical(e.to_string()),
            e => CliError::Other(e.to_string()),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Other(format!("{}: {e}", path.display()))
}

/// Config from `path` (defaults when absent) and whether it pins the seed.
fn load_config(path: Option<&Path>) -> Result<(ConfigFile, bool), CliError> {
    let Some(path) = path else {
        return Ok((ConfigFile::default(), false));
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let cfg = ConfigFile::from_json(&text)?;
    let pinned = serde_json::from_str::<serde_json::Value>(&text)
        .ok()
        .and_then(|v| v.get("scene").and_then(|s| s.get("seed")).cloned())
        .is_some();
    Ok((cfg, pinned))
}

/// Seed precedence: flag, then config file, then `MLC_SEED`, then default.
fn resolve_seed(cfg: &mut ConfigFile, flag: Option<u64>, pinned: bool) -> Result<(), CliError> {
    if let Some(seed) = flag {
        cfg.scene.seed = seed;
    } else if !pinned {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            cfg.scene.seed = raw
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}: `{raw}` is not an unsigned integer")))?;
        }
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io_error(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CliError> {
    dump::write_lines(create(path)?, records).map_err(|e| io_error(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn out_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| io_error(out, e))
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn gt_records(image_id: usize, gts: &[GroundTruth]) -> impl Iterator<Item = GroundTruthDumpRecord> + '_ {
    gts.iter().map(move |g| GroundTruthDumpRecord::new(image_id, g))
}

pub fn simulate(
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    split: Split,
    count: Option<usize>,
) -> Result<(), CliError> {
    let (mut cfg, pinned) = load_config(config)?;
    resolve_seed(&mut cfg, seed, pinned)?;
    let (name, default_count) = match split {
        Split::Train => ("train", cfg.train.train_scenes),
        Split::Val => ("val", cfg.train.val_scenes),
    };
    let count = count.unwrap_or(default_count);
    let scenes = match split {
        Split::Train => train_scenes(&cfg.scene, count),
        Split::Val => val_scenes(&cfg.scene, count),
    }
    .map_err(|e| CliError::Config(e.to_string()))?;

    out_dir(out)?;
    let scenes_path = out.join("scenes.jsonl");
    let gts_path = out.join("gts.jsonl");
    write_jsonl(&scenes_path, &scenes)?;
    let gts: Vec<_> = scenes.iter().flat_map(|s| gt_records(s.image_id, &s.gts)).collect();
    write_jsonl(&gts_path, &gts)?;

    print_json(&json!({
        "split": name,
        "seed": cfg.scene.seed,
        "scenes": scenes.len(),
        "objects": gts.len(),
        "priors_per_scene": scenes.first().map_or(0, |s| s.priors.len()),
        "files": [scenes_path, gts_path],
    }));
    Ok(())
}

pub fn train(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let (mut cfg, pinned) = load_config(config)?;
    resolve_seed(&mut cfg, seed, pinned)?;
    cfg.validate()?;
    let outcome = mlc_core::sim::train(&cfg.scene, &cfg.train)?;

    out_dir(out)?;
    let ckpt = out.join("checkpoint.txt");
    let mut w = create(&ckpt)?;
    write_checkpoint(&outcome.params, &mut w).map_err(|e| CliError::Other(e.to_string()))?;
    w.flush().map_err(|e| io_error(&ckpt, e))?;
    write_jsonl(&out.join("train_log.jsonl"), &outcome.log)?;

    let val = val_scenes(&cfg.scene, cfg.train.val_scenes).map_err(|e| CliError::Config(e.to_string()))?;
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for scene in &val {
        let cands = predict(&outcome.params, scene);
        dets.extend(
            detections(scene, &cands, cfg.train.score_threshold)
                .iter()
                .map(DetectionDumpRecord::from_detection),
        );
        gts.extend(gt_records(scene.image_id, &scene.gts));
    }
    write_jsonl(&out.join("val_dets.jsonl"), &dets)?;
    write_jsonl(&out.join("val_gts.jsonl"), &gts)?;

    let report = json!({
        "schema": 1,
        "seed": cfg.scene.seed,
        "epochs": outcome.log.len(),
        "nms": cfg.train.nms,
        "final_epoch": outcome.log.last(),
        "validation": outcome.validation,
        "config": cfg,
    });
    write_text(
        &out.join("report.json"),
        &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
    )?;
    print_json(&report);
    Ok(())
}

pub struct NmsOverrides {
    pub mode: Option<NmsMode>,
    pub iou_threshold: Option<f64>,
    pub max_out: Option<usize>,
    pub disabled: bool,
}

fn read_dumps(dets: &Path, gts: &Path) -> Result<(Vec<Detection>, BTreeMap<usize, Vec<GroundTruth>>), CliError> {
    let d = dump::read_detections(open(dets)?, &dets.display().to_string())?;
    let g = dump::read_ground_truth(open(gts)?, &gts.display().to_string())?;
    Ok((d, g))
}

#[derive(Debug, Serialize)]
struct DumpDivergence {
    divergence: Option<f64>,
    divergence_degenerate: bool,
    divergence_per_object: Option<f64>,
    pairs: usize,
    objects: usize,
    nms_mode: NmsMode,
    divergence_population: &'static str,
}

fn dump_divergence(
    dets: &[Detection],
    gts: &BTreeMap<usize, Vec<GroundTruth>>,
    mode: NmsMode,
) -> DumpDivergence {
    let mut groups: BTreeMap<(usize, usize), Vec<(f64, f64)>> = BTreeMap::new();
    for d in dets {
        let Some(image) = gts.get(&d.image_id) else { continue };
        let mut best: Option<(usize, f64)> = None;
        for (k, g) in image.iter().enumerate() {
            if g.label != d.class {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
                best = Some((k, v));
            }
        }
        if let Some((k, v)) = best {
            groups
                .entry((d.image_id, k))
                .or_default()
                .push((ranking_key(d, mode), v));
        }
    }
    let pooled: Vec<(f64, f64)> = groups.values().flatten().copied().collect();
    let metric = divergence_metric(&pooled).ok();
    DumpDivergence {
        divergence: metric.as_ref().map(|m| m.rho),
        divergence_degenerate: metric.as_ref().is_some_and(|m| m.degenerate),
        divergence_per_object: grouped_divergence(groups.values().map(Vec::as_slice)),
        pairs: pooled.len(),
        objects: groups.len(),
        nms_mode: mode,
        divergence_population: DUMP_POPULATION,
    }
}

pub fn eval(
    dets: &Path,
    gts: &Path,
    config: Option<&Path>,
    overrides: NmsOverrides,
) -> Result<(), CliError> {
    let (nms_cfg, eval_cfg): (NmsConfig, EvalConfig) = match config {
        Some(_) => {
            let (cfg, _) = load_config(config)?;
            (cfg.train.nms, cfg.train.eval)
        }
        None => (NmsConfig::default(), EvalConfig::default()),
    };
    let nms_cfg = NmsConfig {
        mode: overrides.mode.unwrap_or(nms_cfg.mode),
        iou_threshold: overrides.iou_threshold.unwrap_or(nms_cfg.iou_threshold),
        max_out: overrides.max_out.unwrap_or(nms_cfg.max_out),
    };
    if !(nms_cfg.iou_threshold > 0.0 && nms_cfg.iou_threshold <= 1.0) {
        return Err(CliError::Config("--iou-threshold must lie in (0, 1]".into()));
    }
    if nms_cfg.max_out == 0 {
        return Err(CliError::Config("--max-out must be >= 1".into()));
    }

    let (raw, gts) = read_dumps(dets, gts)?;
    let kept = if overrides.disabled { raw.clone() } else { nms_per_class(&raw, &nms_cfg) };
    let mut report = evaluate(&kept, &gts, &eval_cfg);
    let div = dump_divergence(&raw, &gts, nms_cfg.mode);
    report.divergence = div.divergence;
    report.divergence_degenerate = div.divergence_degenerate;
    report.divergence_population = DUMP_POPULATION.to_string();
    print_json(&json!({
        "nms": if overrides.disabled { None } else { Some(nms_cfg) },
        "report": report,
        "divergence_per_object": div.divergence_per_object,
    }));
    Ok(())
}

pub fn divergence(dets: &Path, gts: &Path, mode: NmsMode) -> Result<(), CliError> {
    let (raw, gts) = read_dumps(dets, gts)?;
    print_json(&dump_divergence(&raw, &gts, mode));
    Ok(())
}

pub fn benchmark(config: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let (cfg, _) = load_config(config)?;
    let report = run_benchmark(&cfg)?;
    out_dir(out)?;
    let json = report.to_json();
    let table = report.table();
    let paths: [PathBuf; 2] = [out.join("benchmark.json"), out.join("benchmark.txt")];
    write_text(&paths[0], &json)?;
    write_text(&paths[1], &table)?;
    println!("{json}");
    eprint!("{table}");
    Ok(())
}
