//! JSON records for annotations and detections.
//!
//! ```json
//! [{"image_id": "scene_00000", "box": [x1, y1, x2, y2], "vis_box": [...], "ignore": false}]
//! [{"image_id": "scene_00000", "box": [...], "p_detect": 0.9, "p_suppress": 0.1, "score": 0.81}]
//! ```
//!
//! Unknown fields are rejected; `p_suppress` is optional.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Annotation, BBox, Detection};

/// Allowed gap between a stored score and `p_detect * (1 - p_suppress)`.
pub const SCORE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRecord {
    image_id: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    vis_box: [f64; 4],
    ignore: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionRecord {
    image_id: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    p_detect: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p_suppress: Option<f64>,
    score: f64,
}

fn parse<T: DeserializeOwned>(text: &str, source: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Json {
        path: format!("{source}: {}", e.path()),
        message: e.inner().to_string(),
    })
}

fn record_error(source: &str, idx: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Json {
        path: format!("{source}: [{idx}].{field}"),
        message: message.into(),
    }
}

fn finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

fn to_box(a: [f64; 4], source: &str, idx: usize, field: &str) -> Result<BBox> {
    BBox::from_array(a).map_err(|e| record_error(source, idx, field, e.to_string()))
}

pub fn annotations_from_json(text: &str, source: &str) -> Result<Vec<Annotation>> {
    let records: Vec<AnnotationRecord> = parse(text, source)?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let full = to_box(r.bbox, source, i, "box")?;
            let vis = to_box(r.vis_box, source, i, "vis_box")?;
            Annotation::new(r.image_id, full, vis, r.ignore).map_err(|e| record_error(source, i, "vis_box", e.to_string()))
        })
        .collect()
}

pub fn annotations_to_json(annotations: &[Annotation]) -> Result<String> {
    let records: Vec<AnnotationRecord> = annotations
        .iter()
        .map(|a| AnnotationRecord {
            image_id: a.image_id.clone(),
            bbox: a.bbox.to_array(),
            vis_box: a.visible_box.to_array(),
            ignore: a.ignore,
        })
        .collect();
    serde_json::to_string_pretty(&records).map_err(|e| Error::Json {
        path: "annotations".into(),
        message: e.to_string(),
    })
}

pub fn detections_from_json(text: &str, source: &str) -> Result<Vec<Detection>> {
    let records: Vec<DetectionRecord> = parse(text, source)?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let bbox = to_box(r.bbox, source, i, "box")?;
            let mut det = Detection::new(r.image_id, bbox, r.p_detect)
                .map_err(|e| record_error(source, i, "p_detect", e.to_string()))?;
            if let Some(ps) = r.p_suppress {
                det = det
                    .with_suppression(ps)
                    .map_err(|e| record_error(source, i, "p_suppress", e.to_string()))?;
            }
            if !r.score.is_finite() || (det.score() - r.score).abs() > SCORE_TOLERANCE {
                return Err(record_error(
                    source,
                    i,
                    "score",
                    format!("score {} disagrees with p_detect * (1 - p_suppress) = {}", r.score, det.score()),
                ));
            }
            Ok(det)
        })
        .collect()
}

pub fn detections_to_json(detections: &[Detection]) -> Result<String> {
    let mut records = Vec::with_capacity(detections.len());
    for (i, d) in detections.iter().enumerate() {
        let mut vals = d.bbox().to_array().to_vec();
        vals.extend([d.p_detect(), d.score()]);
        vals.extend(d.p_suppress());
        if !finite(&vals) {
            return Err(record_error("detections", i, "", "non-finite value"));
        }
        records.push(DetectionRecord {
            image_id: d.image_id().to_string(),
            bbox: d.bbox().to_array(),
            p_detect: d.p_detect(),
            p_suppress: d.p_suppress(),
            score: d.score(),
        });
    }
    serde_json::to_string_pretty(&records).map_err(|e| Error::Json {
        path: "detections".into(),
        message: e.to_string(),
    })
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    let p = path.as_ref();
    annotations_from_json(&read_text(p)?, &p.display().to_string())
}

pub fn write_annotations(path: impl AsRef<Path>, annotations: &[Annotation]) -> Result<()> {
    let p = path.as_ref();
    std::fs::write(p, annotations_to_json(annotations)?).map_err(|e| Error::io(p, e))
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let p = path.as_ref();
    detections_from_json(&read_text(p)?, &p.display().to_string())
}

pub fn write_detections(path: impl AsRef<Path>, detections: &[Detection]) -> Result<()> {
    let p = path.as_ref();
    std::fs::write(p, detections_to_json(detections)?).map_err(|e| Error::io(p, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_list() {
        assert!(annotations_from_json("[]", "t").unwrap().is_empty());
        assert!(detections_from_json("[]", "t").unwrap().is_empty());
    }

    #[test]
    fn random_records_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut anns = Vec::new();
        let mut dets = Vec::new();
        for i in 0..1000 {
            let x: f64 = rng.gen_range(-10.0..500.0);
            let y: f64 = rng.gen_range(-10.0..500.0);
            let h: f64 = rng.gen_range(1.0..200.0);
            let full = BBox::new(x, y, x + 0.41 * h, y + h).unwrap();
            let vis = BBox::new(x, y, x + 0.41 * h, y + h * rng.gen_range(0.1..1.0)).unwrap();
            anns.push(Annotation::new(format!("img{}", i % 7), full, vis, rng.gen_bool(0.1)).unwrap());
            let mut d = Detection::new(format!("img{}", i % 7), full, rng.gen::<f64>()).unwrap();
            if rng.gen_bool(0.5) {
                d = d.with_suppression(rng.gen::<f64>()).unwrap();
            }
            dets.push(d);
        }
        let back = annotations_from_json(&annotations_to_json(&anns).unwrap(), "t").unwrap();
        assert_eq!(back, anns);
        let back = detections_from_json(&detections_to_json(&dets).unwrap(), "t").unwrap();
        assert_eq!(back, dets);
    }

    #[test]
    fn unknown_fields_are_rejected_with_path() {
        let text = r#"[{"image_id": "a", "box": [0,0,1,1], "vis_box": [0,0,1,1], "ignore": false},
                      {"image_id": "a", "box": [0,0,1,1], "vis_box": [0,0,1,1], "ignore": false, "extra": 1}]"#;
        let err = annotations_from_json(text, "annos.json").unwrap_err().to_string();
        assert!(err.contains("[1]"), "{err}");
        assert!(err.contains("extra"), "{err}");
    }

    #[test]
    fn inconsistent_score_is_rejected() {
        let text = r#"[{"image_id": "a", "box": [0,0,1,1], "p_detect": 0.8, "p_suppress": 0.25, "score": 0.61}]"#;
        let err = detections_from_json(text, "d.json").unwrap_err().to_string();
        assert!(err.contains("[0].score"), "{err}");
        let ok = r#"[{"image_id": "a", "box": [0,0,1,1], "p_detect": 0.8, "p_suppress": 0.25, "score": 0.6}]"#;
        assert!(detections_from_json(ok, "d.json").is_ok());
    }

    #[test]
    fn malformed_and_invalid_inputs() {
        assert!(annotations_from_json("[{", "t").is_err());
        let degenerate = r#"[{"image_id": "a", "box": [0,0,0,1], "vis_box": [0,0,1,1], "ignore": false}]"#;
        assert!(annotations_from_json(degenerate, "t").unwrap_err().to_string().contains("[0].box"));
        let outside = r#"[{"image_id": "a", "box": [0,0,1,1], "vis_box": [0,0,2,1], "ignore": false}]"#;
        assert!(annotations_from_json(outside, "t").is_err());
        let nan = r#"[{"image_id": "a", "box": [0,0,1,1], "p_detect": NaN, "score": 0.5}]"#;
        assert!(detections_from_json(nan, "t").is_err());
    }
}
