//! JSON-lines dump records for detections and ground truth.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use mlc_core::geometry::BBox;
use mlc_core::{Detection, GroundTruth};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionDumpRecord {
    pub image_id: usize,
    pub class: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub raw_conf: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou_pred: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthDumpRecord {
    pub image_id: usize,
    pub object_id: usize,
    pub class: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

fn unit(name: &str, v: f64) -> Result<(), String> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(format!("{name} {v} is outside [0, 1]"))
    }
}

fn valid_box(b: [f64; 4]) -> Result<BBox, String> {
    if !b.iter().all(|v| v.is_finite()) {
        return Err(format!("box {b:?} has non-finite coordinates"));
    }
    BBox::from_array(b).map_err(|e| e.to_string())
}

impl DetectionDumpRecord {
    pub fn from_detection(d: &Detection) -> Self {
        Self {
            image_id: d.image_id,
            class: d.class,
            bbox: d.bbox.to_array(),
            raw_conf: d.raw_conf,
            iou_pred: d.iou_pred,
        }
    }

    /// Detection with `id` set to the record's line index.
    pub fn to_detection(&self, id: usize) -> Result<Detection, String> {
        let bbox = valid_box(self.bbox)?;
        unit("raw_conf", self.raw_conf)?;
        if let Some(p) = self.iou_pred {
            unit("iou_pred", p)?;
        }
        Ok(Detection {
            id,
            image_id: self.image_id,
            class: self.class,
            bbox,
            score: self.raw_conf,
            raw_conf: self.raw_conf,
            iou_pred: self.iou_pred,
        })
    }
}

impl GroundTruthDumpRecord {
    pub fn new(image_id: usize, gt: &GroundTruth) -> Self {
        Self {
            image_id,
            object_id: gt.id,
            class: gt.label,
            bbox: gt.bbox.to_array(),
        }
    }

    pub fn to_ground_truth(&self) -> Result<GroundTruth, String> {
        Ok(GroundTruth {
            id: self.object_id,
            bbox: valid_box(self.bbox)?,
            label: self.class,
        })
    }
}

/// Parse every line of `input`; blank lines are malformed records too.
pub fn read_lines<T, U, R>(
    input: R,
    path: &str,
    mut convert: impl FnMut(T, usize) -> Result<U, String>,
) -> Result<Vec<U>, DumpError>
where
    T: DeserializeOwned,
    R: BufRead,
{
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|source| DumpError::Io {
            path: path.to_string(),
            source,
        })?;
        let malformed = |message: String| DumpError::Malformed {
            path: path.to_string(),
            line: i + 1,
            message,
        };
        let record: T = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        out.push(convert(record, i).map_err(malformed)?);
    }
    Ok(out)
}

pub fn read_detections<R: BufRead>(input: R, path: &str) -> Result<Vec<Detection>, DumpError> {
    read_lines(input, path, |r: DetectionDumpRecord, i| r.to_detection(i))
}

/// Ground truth grouped by image. Object ids must be unique per image.
pub fn read_ground_truth<R: BufRead>(
    input: R,
    path: &str,
) -> Result<BTreeMap<usize, Vec<GroundTruth>>, DumpError> {
    let records = read_lines(input, path, |r: GroundTruthDumpRecord, i| {
        r.to_ground_truth().map(|g| (r.image_id, g, i))
    })?;
    let mut by_image: BTreeMap<usize, Vec<GroundTruth>> = BTreeMap::new();
    for (image, gt, i) in records {
        let list = by_image.entry(image).or_default();
        if list.iter().any(|g| g.id == gt.id) {
            return Err(DumpError::Malformed {
                path: path.to_string(),
                line: i + 1,
                message: format!("duplicate object_id {} in image {image}", gt.id),
            });
        }
        list.push(gt);
    }
    Ok(by_image)
}

pub fn write_lines<T: Serialize, W: Write>(mut out: W, records: &[T]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
