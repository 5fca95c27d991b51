//! On-disk formats.
//!
//! * scenes: JSON lines, one scene per line, boxes as `[x_min, y_min, w, h]`
//! * detections: JSON lines, one detection per line, same box convention
//! * models: one JSON document carrying a `format_version` field

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::assign::GroundTruth;
use crate::cascade::Detector;
use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::geometry::BBox;
use crate::harness::Scene;

pub const MODEL_FORMAT_VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
struct GroundTruthRecord {
    bbox: [f64; 4],
    class_id: usize,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    image_id: u64,
    width: f64,
    height: f64,
    gts: Vec<GroundTruthRecord>,
    proposals: Vec<[f64; 4]>,
}

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    image_id: u64,
    class_id: usize,
    bbox: [f64; 4],
    score: f64,
}

impl From<&Scene> for SceneRecord {
    fn from(s: &Scene) -> Self {
        Self {
            image_id: s.image_id,
            width: s.width,
            height: s.height,
            gts: s
                .gts
                .iter()
                .map(|g| GroundTruthRecord {
                    bbox: g.bbox.to_corner_form(),
                    class_id: g.class_id,
                })
                .collect(),
            proposals: s.proposals.iter().map(BBox::to_corner_form).collect(),
        }
    }
}

impl TryFrom<SceneRecord> for Scene {
    type Error = Error;

    fn try_from(r: SceneRecord) -> Result<Self> {
        if !(r.width > 0.0 && r.height > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "image size {}x{} must be positive",
                r.width, r.height
            )));
        }
        let gts = r
            .gts
            .into_iter()
            .map(|g| {
                if g.class_id == 0 {
                    return Err(Error::InvalidArgument(
                        "class_id 0 is reserved for background".into(),
                    ));
                }
                Ok(GroundTruth {
                    bbox: BBox::from_corner_form(g.bbox)?,
                    class_id: g.class_id,
                })
            })
            .collect::<Result<_>>()?;
        let proposals = r
            .proposals
            .into_iter()
            .map(BBox::from_corner_form)
            .collect::<Result<_>>()?;
        Ok(Scene {
            image_id: r.image_id,
            width: r.width,
            height: r.height,
            gts,
            proposals,
        })
    }
}

fn warn_unknown(path: &Path, line: usize, obj: &Map<String, Value>, known: &[&str]) {
    for key in obj.keys() {
        if !known.contains(&key.as_str()) {
            warn!("{}:{line}: ignoring unknown field `{key}`", path.display());
        }
    }
}

fn parse_error(path: &Path, line: usize, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

/// Reads a JSON-lines file, converting each non-empty line with `convert`.
fn read_lines<T, R>(path: &Path, known: &[&str], convert: impl Fn(R) -> Result<T>) -> Result<Vec<T>>
where
    R: for<'de> Deserialize<'de>,
{
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value =
            serde_json::from_str(&line).map_err(|e| parse_error(path, line_no, e))?;
        if let Some(obj) = value.as_object() {
            warn_unknown(path, line_no, obj, known);
        }
        let record: R = serde_json::from_value(value).map_err(|e| parse_error(path, line_no, e))?;
        out.push(convert(record).map_err(|e| parse_error(path, line_no, e))?);
    }
    Ok(out)
}

fn write_lines<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(path: &Path, scenes: &[Scene]) -> Result<()> {
    write_lines(path, scenes.iter().map(SceneRecord::from))
}

pub fn load_dataset(path: &Path) -> Result<Vec<Scene>> {
    read_lines(
        path,
        &["image_id", "width", "height", "gts", "proposals"],
        |r: SceneRecord| Scene::try_from(r),
    )
}

pub fn save_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    write_lines(
        path,
        dets.iter().map(|d| DetectionRecord {
            image_id: d.image_id,
            class_id: d.class_id,
            bbox: d.bbox.to_corner_form(),
            score: d.score,
        }),
    )
}

pub fn load_detections(path: &Path) -> Result<Vec<Detection>> {
    read_lines(
        path,
        &["image_id", "class_id", "bbox", "score"],
        |r: DetectionRecord| {
            if !r.score.is_finite() {
                return Err(Error::NonFinite("detection score"));
            }
            Ok(Detection {
                image_id: r.image_id,
                class_id: r.class_id,
                bbox: BBox::from_corner_form(r.bbox)?,
                score: r.score,
            })
        },
    )
}

#[derive(Serialize)]
struct ModelDocumentRef<'a> {
    format_version: u64,
    detector: &'a Detector,
}

#[derive(Deserialize)]
struct ModelDocument {
    detector: Detector,
}

pub fn model_to_json(detector: &Detector) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ModelDocumentRef {
        format_version: MODEL_FORMAT_VERSION,
        detector,
    })?)
}

pub fn model_from_json(text: &str) -> Result<Detector> {
    let value: Value = serde_json::from_str(text)?;
    let found = value.get("format_version").and_then(Value::as_u64);
    if found != Some(MODEL_FORMAT_VERSION) {
        return Err(Error::Version {
            found,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let doc: ModelDocument = serde_json::from_value(value)?;
    doc.detector.validate()?;
    Ok(doc.detector)
}

pub fn save_model(path: &Path, detector: &Detector) -> Result<()> {
    let mut text = model_to_json(detector)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Detector> {
    model_from_json(&fs::read_to_string(path)?)
}
