//! Fast suppression head.
//!
//! Each surviving detection is pooled from the stride-4 feature map with ROI
//! Align and scored by a small conv + dense classifier. The head predicts the
//! probability that the detection should be kept; `p_suppress = 1 - keep`.
//! It is trained on detached features, so its loss never reaches the
//! backbone or the detection head.

use crate::error::{Error, Result};
use crate::geometry::{ioa, iou, Annotation, BBox, Detection};
use crate::loss::bce_loss;
use crate::nn::optim::Optimizer;
use crate::nn::params::ParamSet;
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiAlignConfig {
    /// Output cells `(rows, cols)`.
    pub output_size: (usize, usize),
    /// Sampling points per output cell along each axis.
    pub sampling_ratio: usize,
    pub feature_stride: usize,
}

impl Default for RoiAlignConfig {
    fn default() -> Self {
        RoiAlignConfig {
            output_size: (7, 7),
            sampling_ratio: 2,
            feature_stride: 4,
        }
    }
}

impl RoiAlignConfig {
    fn validate(&self) -> Result<()> {
        if self.output_size.0 == 0 || self.output_size.1 == 0 || self.sampling_ratio == 0 || self.feature_stride == 0 {
            return Err(Error::InvalidArgument(format!("invalid ROI Align config {self:?}")));
        }
        Ok(())
    }
}

/// Sparse bilinear sampling weights of one box over one feature plane.
///
/// Feature cell `(i, j)` is centered at `(j + 0.5, i + 0.5)` in feature
/// coordinates; taps falling outside the plane read zero.
#[derive(Debug, Clone)]
pub struct RoiSampler {
    output_size: (usize, usize),
    plane_len: usize,
    bins: Vec<Vec<(usize, f64)>>,
}

impl RoiSampler {
    pub fn new(bbox: &BBox, feat_h: usize, feat_w: usize, cfg: &RoiAlignConfig) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.feature_stride as f64;
        let (x1, y1) = (bbox.x1() / s, bbox.y1() / s);
        let (bw, bh) = (bbox.width() / s, bbox.height() / s);
        if !(bw > 0.0 && bh > 0.0) {
            return Err(Error::DegenerateBox {
                x1: bbox.x1(),
                y1: bbox.y1(),
                x2: bbox.x2(),
                y2: bbox.y2(),
            });
        }
        let (ph, pw) = cfg.output_size;
        let sr = cfg.sampling_ratio;
        let (cell_h, cell_w) = (bh / ph as f64, bw / pw as f64);
        let norm = 1.0 / (sr * sr) as f64;

        let taps = |coord: f64, len: usize| -> [(isize, f64); 2] {
            let u = coord - 0.5;
            let i0 = u.floor();
            let f = u - i0;
            let i0 = i0 as isize;
            let mut out = [(i0, 1.0 - f), (i0 + 1, f)];
            for t in out.iter_mut() {
                if t.0 < 0 || t.0 >= len as isize {
                    t.1 = 0.0;
                }
            }
            out
        };

        let mut bins = Vec::with_capacity(ph * pw);
        for by in 0..ph {
            for bx in 0..pw {
                let mut w: Vec<(usize, f64)> = Vec::with_capacity(4 * sr * sr);
                for sy in 0..sr {
                    let y = y1 + (by as f64 + (sy as f64 + 0.5) / sr as f64) * cell_h;
                    let ty = taps(y, feat_h);
                    for sx in 0..sr {
                        let x = x1 + (bx as f64 + (sx as f64 + 0.5) / sr as f64) * cell_w;
                        let tx = taps(x, feat_w);
                        for &(iy, wy) in &ty {
                            for &(ix, wx) in &tx {
                                let wt = wy * wx * norm;
                                if wt != 0.0 {
                                    w.push((iy as usize * feat_w + ix as usize, wt));
                                }
                            }
                        }
                    }
                }
                bins.push(w);
            }
        }
        Ok(RoiSampler {
            output_size: (ph, pw),
            plane_len: feat_h * feat_w,
            bins,
        })
    }

    pub fn output_size(&self) -> (usize, usize) {
        self.output_size
    }

    pub fn plane_len(&self) -> usize {
        self.plane_len
    }

    pub(crate) fn gather(&self, plane: &[f64], out: &mut [f64]) {
        for (o, taps) in out.iter_mut().zip(&self.bins) {
            *o = taps.iter().map(|&(i, w)| w * plane[i]).sum();
        }
    }

    pub(crate) fn scatter(&self, dout: &[f64], dplane: &mut [f64]) {
        for (d, taps) in dout.iter().zip(&self.bins) {
            for &(i, w) in taps {
                dplane[i] += w * d;
            }
        }
    }
}

fn feature_dims(features: &Tensor) -> Result<(usize, usize, usize)> {
    match features.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::InvalidArgument(format!("features must be [C,H,W], got {s:?}"))),
    }
}

/// Pools a `[C, ph, pw]` patch for `bbox` (image coordinates) from `[C, H, W]` features.
pub fn roi_align(features: &Tensor, bbox: &BBox, cfg: &RoiAlignConfig) -> Result<Tensor> {
    let (c, h, w) = feature_dims(features)?;
    let sampler = RoiSampler::new(bbox, h, w, cfg)?;
    let (ph, pw) = cfg.output_size;
    let mut out = vec![0.0; c * ph * pw];
    for ci in 0..c {
        sampler.gather(
            &features.data()[ci * h * w..(ci + 1) * h * w],
            &mut out[ci * ph * pw..(ci + 1) * ph * pw],
        );
    }
    Tensor::new(vec![c, ph, pw], out)
}

/// Gradient of `roi_align` w.r.t. the feature map, given the output gradient.
pub fn roi_align_backward(
    feature_shape: &[usize],
    bbox: &BBox,
    cfg: &RoiAlignConfig,
    grad_output: &Tensor,
) -> Result<Tensor> {
    let (c, h, w) = match feature_shape {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::InvalidArgument(format!("features must be [C,H,W], got {s:?}"))),
    };
    let (ph, pw) = cfg.output_size;
    grad_output.check_shape(&[c, ph, pw])?;
    let sampler = RoiSampler::new(bbox, h, w, cfg)?;
    let mut grad = vec![0.0; c * h * w];
    for ci in 0..c {
        sampler.scatter(
            &grad_output.data()[ci * ph * pw..(ci + 1) * ph * pw],
            &mut grad[ci * h * w..(ci + 1) * h * w],
        );
    }
    Tensor::new(vec![c, h, w], grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuppressionLabel {
    pub detection_index: usize,
    /// `true`: real pedestrian, keep. `false`: false positive, suppress.
    pub keep: bool,
}

/// Greedy one-to-one matching of detections (by descending `p_detect`) to
/// non-ignored annotations at IoU >= `iou_match`. Unmatched detections that
/// sit on an ignore region (ioa >= `iou_match`) get no label.
pub fn make_suppression_labels(
    detections: &[Detection],
    annotations: &[Annotation],
    iou_match: f64,
) -> Vec<SuppressionLabel> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].p_detect().total_cmp(&detections[a].p_detect()).then(a.cmp(&b)));
    let mut taken = vec![false; annotations.len()];
    let mut labels = Vec::with_capacity(detections.len());
    for di in order {
        let det = detections[di].bbox();
        let mut best: Option<(usize, f64)> = None;
        for (ai, ann) in annotations.iter().enumerate() {
            if ann.ignore || taken[ai] {
                continue;
            }
            let o = iou(det, &ann.bbox);
            if o >= iou_match && best.is_none_or(|(_, b)| o > b) {
                best = Some((ai, o));
            }
        }
        if let Some((ai, _)) = best {
            taken[ai] = true;
            labels.push(SuppressionLabel {
                detection_index: di,
                keep: true,
            });
            continue;
        }
        let on_ignore = annotations
            .iter()
            .any(|a| a.ignore && ioa(det, &a.bbox) >= iou_match);
        if !on_ignore {
            labels.push(SuppressionLabel {
                detection_index: di,
                keep: false,
            });
        }
    }
    labels.sort_by_key(|l| l.detection_index);
    labels
}

/// Parameter names of the suppression head.
pub mod names {
    pub const CONV_W: &str = "sup.conv.w";
    pub const CONV_B: &str = "sup.conv.b";
    pub const FC1_W: &str = "sup.fc1.w";
    pub const FC1_B: &str = "sup.fc1.b";
    pub const FC2_W: &str = "sup.fc2.w";
    pub const FC2_B: &str = "sup.fc2.b";
    pub const ALL: [&str; 6] = [CONV_W, CONV_B, FC1_W, FC1_B, FC2_W, FC2_B];
}

pub const HIDDEN_UNITS: usize = 64;

/// Shapes of the head parameters for `channels` input feature channels.
pub fn head_shapes(channels: usize, cfg: &RoiAlignConfig) -> Vec<(&'static str, Vec<usize>)> {
    let (ph, pw) = cfg.output_size;
    vec![
        (names::CONV_W, vec![channels, channels, 3, 3]),
        (names::CONV_B, vec![channels]),
        (names::FC1_W, vec![HIDDEN_UNITS, channels * ph * pw]),
        (names::FC1_B, vec![HIDDEN_UNITS]),
        (names::FC2_W, vec![1, HIDDEN_UNITS]),
        (names::FC2_B, vec![1]),
    ]
}

struct HeadGraph {
    keep: Var,
    params: Vec<(&'static str, Var)>,
}

fn build_head(
    tape: &mut Tape,
    features: &Tensor,
    boxes: &[BBox],
    params: &ParamSet,
    cfg: &RoiAlignConfig,
    trainable: bool,
) -> Result<HeadGraph> {
    let (c, h, w) = feature_dims(features)?;
    let mut pv = Vec::with_capacity(names::ALL.len());
    for (name, shape) in head_shapes(c, cfg) {
        let t = params.require(name)?;
        t.check_shape(&shape)?;
        pv.push((name, tape.leaf(t.clone(), trainable)));
    }
    let samplers = boxes
        .iter()
        .map(|b| RoiSampler::new(b, h, w, cfg))
        .collect::<Result<Vec<_>>>()?;
    // Detached: the features enter as a constant.
    let feat = tape.leaf(features.clone(), false);
    let pooled = tape.roi_align(feat, samplers)?;
    let conv = tape.conv2d(pooled, pv[0].1, pv[1].1, 1)?;
    let conv = tape.relu(conv);
    let (ph, pw) = cfg.output_size;
    let flat = tape.reshape(conv, vec![boxes.len(), c * ph * pw])?;
    let hidden = tape.linear(flat, pv[2].1, pv[3].1)?;
    let hidden = tape.relu(hidden);
    let logit = tape.linear(hidden, pv[4].1, pv[5].1)?;
    let keep = tape.sigmoid(logit);
    Ok(HeadGraph { keep, params: pv })
}

/// Suppression probability for each detection, in input order.
pub fn suppression_forward(
    features: &Tensor,
    detections: &[Detection],
    params: &ParamSet,
    cfg: &RoiAlignConfig,
) -> Result<Vec<f64>> {
    if detections.is_empty() {
        return Ok(Vec::new());
    }
    let boxes: Vec<BBox> = detections.iter().map(|d| *d.bbox()).collect();
    let mut tape = Tape::new();
    let g = build_head(&mut tape, features, &boxes, params, cfg, false)?;
    Ok(tape.value(g.keep).data().iter().map(|k| 1.0 - k).collect())
}

/// One BCE step on the head parameters only. Returns the loss before the
/// step, or `None` when there is nothing labelled to train on.
pub fn train_suppression_step(
    features: &Tensor,
    detections: &[Detection],
    labels: &[SuppressionLabel],
    params: &mut ParamSet,
    optimizer: &mut Optimizer,
    lr: f64,
    cfg: &RoiAlignConfig,
) -> Result<Option<f64>> {
    if labels.is_empty() {
        return Ok(None);
    }
    let mut boxes = Vec::with_capacity(labels.len());
    let mut targets = Vec::with_capacity(labels.len());
    for l in labels {
        let det = detections.get(l.detection_index).ok_or(Error::LengthMismatch {
            what: "suppression label index",
            left: l.detection_index,
            right: detections.len(),
        })?;
        boxes.push(*det.bbox());
        targets.push(if l.keep { 1.0 } else { 0.0 });
    }
    let mut tape = Tape::new();
    let g = build_head(&mut tape, features, &boxes, params, cfg, true)?;
    let (loss, dkeep) = bce_loss(tape.value(g.keep).data(), &targets)?;
    let grads = tape.backward(&[(g.keep, &dkeep)])?;
    for (name, var) in &g.params {
        if let Some(gr) = grads.get(*var) {
            params.require_mut(name)?.accumulate_grad(gr);
        }
    }
    optimizer.step(params, &names::ALL, lr)?;
    for name in names::ALL {
        params.require_mut(name)?.zero_grad();
    }
    Ok(Some(loss))
}
