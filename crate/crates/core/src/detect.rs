//! Full inference pipeline: detection network, decoding with NMS, then the
//! suppression head and score fusion.

use crate::decode::{decode, fuse_scores, DecodeConfig};
use crate::error::{Error, Result};
use crate::geometry::{Detection, GridShape};
use crate::io::dataset::Sample;
use crate::nn::model::forward_fdn;
use crate::nn::params::ParamSet;
use crate::nn::train::stack_images;
use crate::suppress::{suppression_forward, RoiAlignConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectConfig {
    pub decode: DecodeConfig,
    pub roi: RoiAlignConfig,
    /// Run the suppression head; otherwise `score = p_detect`.
    pub suppress: bool,
    /// Images per forward pass. Results do not depend on it.
    pub batch_size: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            decode: DecodeConfig::default(),
            roi: RoiAlignConfig::default(),
            suppress: true,
            batch_size: 8,
        }
    }
}

/// Detections for every sample, grouped by sample in input order and by
/// descending `p_detect` within a sample.
pub fn detect(params: &ParamSet, samples: &[Sample], cfg: &DetectConfig) -> Result<Vec<Detection>> {
    cfg.decode.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("detect batch size must be positive".into()));
    }
    let mut all = Vec::new();
    for chunk in samples.chunks(cfg.batch_size) {
        let s = chunk[0].image.shape();
        if s.len() != 2 {
            return Err(Error::InvalidArgument(format!("image `{}` is not [H, W]", chunk[0].image_id)));
        }
        let (h, w) = (s[0], s[1]);
        if chunk.iter().any(|x| x.image.shape() != [h, w]) {
            // Mixed sizes: fall back to one image per pass.
            for one in chunk {
                all.extend(detect(params, std::slice::from_ref(one), &DetectConfig { batch_size: 1, ..*cfg })?);
            }
            continue;
        }
        let grid = GridShape::new(h, w, cfg.decode.stride)?;
        let images = stack_images(chunk.iter().map(|x| &x.image), h, w)?;
        let out = forward_fdn(params, &images)?;
        for (k, sample) in chunk.iter().enumerate() {
            let pred = out.prediction(k)?;
            let dets = decode(&sample.image_id, &pred.center, &pred.log_height, &pred.offset, &cfg.decode, grid)?;
            if cfg.suppress {
                let probs = suppression_forward(&out.features(k)?, &dets, params, &cfg.roi)?;
                all.extend(fuse_scores(dets, &probs)?);
            } else {
                all.extend(dets);
            }
        }
    }
    Ok(all)
}
