//! Prediction maps to scored boxes, greedy NMS, and score fusion with the
//! suppression head.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Detection, GridShape};
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub stride: usize,
    /// Width / height of every decoded box.
    pub aspect_ratio: f64,
    /// Cells with center probability below this are skipped.
    pub center_threshold: f64,
    /// Greedy NMS IoU threshold; `None` skips NMS.
    pub nms_iou: Option<f64>,
    pub max_detections: usize,
    pub clip_to_image: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            stride: 4,
            aspect_ratio: 0.41,
            center_threshold: 0.01,
            nms_iou: Some(0.5),
            max_detections: 100,
            clip_to_image: true,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        let nms_ok = self.nms_iou.is_none_or(|t| t > 0.0 && t < 1.0);
        if !(self.aspect_ratio > 0.0) || !(0.0..1.0).contains(&self.center_threshold) || !nms_ok || self.stride == 0 {
            return Err(Error::InvalidArgument(format!("invalid decode config {self:?}")));
        }
        Ok(())
    }
}

/// Descending score, then smaller `y1`, then smaller `x1`.
pub fn score_order(a: &Detection, b: &Detection) -> Ordering {
    b.score()
        .total_cmp(&a.score())
        .then(a.bbox().y1().total_cmp(&b.bbox().y1()))
        .then(a.bbox().x1().total_cmp(&b.bbox().x1()))
}

/// Decodes every cell at or above the threshold into a box, then applies NMS
/// (if configured) and keeps at most `max_detections`, highest score first.
pub fn decode(
    image_id: &str,
    center: &Tensor,
    log_h: &Tensor,
    offset: &Tensor,
    cfg: &DecodeConfig,
    shape: GridShape,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let (mh, mw) = (shape.map_height(), shape.map_width());
    center.check_shape(&[mh, mw])?;
    log_h.check_shape(&[mh, mw])?;
    offset.check_shape(&[2, mh, mw])?;
    let s = cfg.stride as f64;
    let plane = mh * mw;
    let mut dets = Vec::new();
    for i in 0..mh {
        for j in 0..mw {
            let flat = i * mw + j;
            let p = center.data()[flat];
            if p < cfg.center_threshold {
                continue;
            }
            let h = log_h.data()[flat].exp();
            let cx = (j as f64 + offset.data()[flat]) * s;
            let cy = (i as f64 + offset.data()[plane + flat]) * s;
            let Ok(mut bbox) = BBox::from_center(cx, cy, cfg.aspect_ratio * h, h) else {
                continue;
            };
            if cfg.clip_to_image {
                match bbox.clip(shape.width_px as f64, shape.height_px as f64) {
                    Ok(b) => bbox = b,
                    Err(_) => continue,
                }
            }
            dets.push(Detection::new(image_id, bbox, p.clamp(0.0, 1.0))?);
        }
    }
    dets.sort_by(score_order);
    let mut dets = match cfg.nms_iou {
        Some(t) => nms_limited(dets, t, cfg.max_detections),
        None => dets,
    };
    dets.truncate(cfg.max_detections);
    Ok(dets)
}

/// Greedy NMS on `score`: keep the best remaining detection, drop everything
/// overlapping it at IoU >= `iou_threshold`, repeat.
pub fn nms(detections: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    nms_limited(detections, iou_threshold, usize::MAX)
}

/// [`nms`] that stops once `limit` detections are kept; the result equals
/// the first `limit` entries of the full output.
pub fn nms_limited(mut detections: Vec<Detection>, iou_threshold: f64, limit: usize) -> Vec<Detection> {
    detections.sort_by(score_order);
    let mut suppressed = vec![false; detections.len()];
    let mut keep = Vec::new();
    for i in 0..detections.len() {
        if keep.len() == limit {
            break;
        }
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        let bi = *detections[i].bbox();
        for (j, s) in suppressed.iter_mut().enumerate().skip(i + 1) {
            if !*s && iou(&bi, detections[j].bbox()) >= iou_threshold {
                *s = true;
            }
        }
    }
    let mut out = Vec::with_capacity(keep.len());
    let mut slots: Vec<Option<Detection>> = detections.into_iter().map(Some).collect();
    for i in keep {
        out.push(slots[i].take().expect("kept once"));
    }
    out
}

/// Attaches suppression probabilities; `score = p_detect * (1 - p_suppress)`.
/// Boxes and order are unchanged.
pub fn fuse_scores(detections: Vec<Detection>, suppression_probs: &[f64]) -> Result<Vec<Detection>> {
    if detections.len() != suppression_probs.len() {
        return Err(Error::LengthMismatch {
            what: "detections vs suppression probabilities",
            left: detections.len(),
            right: suppression_probs.len(),
        });
    }
    detections
        .into_iter()
        .zip(suppression_probs)
        .map(|(d, &p)| d.with_suppression(p))
        .collect()
}
