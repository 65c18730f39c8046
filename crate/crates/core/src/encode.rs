//! Ground truth to stride-grid supervision targets.

use crate::error::{Error, Result};
use crate::geometry::{Annotation, GridShape};
use crate::nn::tensor::Tensor;

/// Shape of the Gaussian penalty-reduction bump around each center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyConfig {
    /// `sigma_y = height * sigma_height_factor`.
    pub sigma_height_factor: f64,
    /// `sigma_x = width_ratio * sigma_y`.
    pub width_ratio: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            sigma_height_factor: 1.0 / 6.0,
            width_ratio: 0.41,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaps {
    /// `[h, w]`, 1 at positive centers, else 0.
    pub center: Tensor,
    /// `[h, w]` penalty-reduction weights M.
    pub penalty: Tensor,
    /// `[h, w]` natural log of pixel height, meaningful at positives only.
    pub log_height: Tensor,
    /// `[2, h, w]` sub-cell center offset (dx, dy), meaningful at positives only.
    pub offset: Tensor,
    pub pos_mask: Vec<bool>,
    pub shape: GridShape,
}

impl TargetMaps {
    pub fn empty(shape: GridShape) -> Self {
        let (h, w) = (shape.map_height(), shape.map_width());
        TargetMaps {
            center: Tensor::zeros(vec![h, w]),
            penalty: Tensor::zeros(vec![h, w]),
            log_height: Tensor::zeros(vec![h, w]),
            offset: Tensor::zeros(vec![2, h, w]),
            pos_mask: vec![false; h * w],
            shape,
        }
    }

    /// Flat indices of the positive cells, ascending.
    pub fn positives(&self) -> Vec<usize> {
        self.pos_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &p)| p.then_some(i))
            .collect()
    }

    pub fn num_positives(&self) -> usize {
        self.pos_mask.iter().filter(|&&p| p).count()
    }

    /// Normalizer of the per-map losses: `max(1, #positives)`.
    pub fn normalizer(&self) -> f64 {
        self.num_positives().max(1) as f64
    }
}

pub fn encode_targets(annotations: &[Annotation], shape: GridShape) -> Result<TargetMaps> {
    encode_targets_with(annotations, shape, &PenaltyConfig::default())
}

pub fn encode_targets_with(
    annotations: &[Annotation],
    shape: GridShape,
    penalty: &PenaltyConfig,
) -> Result<TargetMaps> {
    if let Some(first) = annotations.first() {
        if let Some(other) = annotations.iter().find(|a| a.image_id != first.image_id) {
            return Err(Error::InvalidAnnotation(format!(
                "annotations from several images: `{}` and `{}`",
                first.image_id, other.image_id
            )));
        }
    }
    let mut maps = TargetMaps::empty(shape);
    let (mh, mw) = (shape.map_height(), shape.map_width());
    let s = shape.stride as f64;
    let min_height = 2.0 * s;

    // Winner per cell: (annotation index, height).
    let mut owner: Vec<Option<(usize, f64)>> = vec![None; mh * mw];
    let mut cells = Vec::new();

    for (ai, ann) in annotations.iter().enumerate() {
        if ann.ignore {
            continue;
        }
        let h = ann.height();
        if h < min_height {
            return Err(Error::InvalidAnnotation(format!(
                "box height {h} below the minimum {min_height} for stride {}",
                shape.stride
            )));
        }
        let (cx, cy) = ann.bbox.center();
        if !(0.0..shape.width_px as f64).contains(&cx) || !(0.0..shape.height_px as f64).contains(&cy) {
            return Err(Error::InvalidAnnotation(format!(
                "center ({cx}, {cy}) outside the {}x{} image",
                shape.width_px, shape.height_px
            )));
        }
        let (ci, cj) = ((cy / s).floor() as usize, (cx / s).floor() as usize);
        let flat = ci * mw + cj;
        cells.push((ai, ci, cj));
        match owner[flat] {
            Some((_, best)) if best <= h => {}
            _ => owner[flat] = Some((ai, h)),
        }
        stamp_gaussian(&mut maps.penalty, ann, ci, cj, shape, penalty);
    }

    for (flat, slot) in owner.iter().enumerate() {
        let Some((ai, h)) = *slot else { continue };
        let (cx, cy) = annotations[ai].bbox.center();
        maps.pos_mask[flat] = true;
        maps.center.data_mut()[flat] = 1.0;
        maps.penalty.data_mut()[flat] = 1.0;
        maps.log_height.data_mut()[flat] = h.ln();
        maps.offset.data_mut()[flat] = cx / s - (cx / s).floor();
        maps.offset.data_mut()[mh * mw + flat] = cy / s - (cy / s).floor();
    }
    debug_assert!(cells.len() >= maps.num_positives());
    Ok(maps)
}

/// Max-combines one object's Gaussian into `penalty` over the cells its box covers.
fn stamp_gaussian(
    penalty: &mut Tensor,
    ann: &Annotation,
    ci: usize,
    cj: usize,
    shape: GridShape,
    cfg: &PenaltyConfig,
) {
    let (mh, mw) = (shape.map_height(), shape.map_width());
    let s = shape.stride as f64;
    let h = ann.height();
    let sigma_y = h * cfg.sigma_height_factor;
    let sigma_x = cfg.width_ratio * sigma_y;
    let b = &ann.bbox;
    let clamp_idx = |v: f64, n: usize| -> usize { (v.max(0.0) as usize).min(n - 1) };
    let i_lo = clamp_idx((b.y1() / s).floor(), mh).min(ci);
    let i_hi = clamp_idx((b.y2() / s).ceil() - 1.0, mh).max(ci);
    let j_lo = clamp_idx((b.x1() / s).floor(), mw).min(cj);
    let j_hi = clamp_idx((b.x2() / s).ceil() - 1.0, mw).max(cj);
    let data = penalty.data_mut();
    for i in i_lo..=i_hi {
        let dy = (i as f64 - ci as f64) * s;
        let gy = dy * dy / (2.0 * sigma_y * sigma_y);
        for j in j_lo..=j_hi {
            let dx = (j as f64 - cj as f64) * s;
            let m = (-(gy + dx * dx / (2.0 * sigma_x * sigma_x))).exp();
            let slot = &mut data[i * mw + j];
            if m > *slot {
                *slot = m;
            }
        }
    }
}
