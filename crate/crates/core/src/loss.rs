//! Detection-head and suppression-head losses with closed-form gradients.
//!
//! Each function returns the scalar loss together with its gradient w.r.t.
//! the predicted map, so the math can be checked without the autodiff tape;
//! the training loop seeds the tape with these gradients.

use crate::encode::TargetMaps;
use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub gamma: f64,
    pub beta: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            gamma: 2.0,
            beta: 4.0,
        }
    }
}

/// Weights of the regression, classification and offset terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_r: f64,
    pub lambda_c: f64,
    pub lambda_o: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_r: 0.05,
            lambda_c: 0.01,
            lambda_o: 0.1,
        }
    }
}

fn same_shape(pred: &Tensor, expected: &[usize]) -> Result<()> {
    pred.check_shape(expected)
}

fn map_shape(t: &TargetMaps) -> Vec<usize> {
    t.center.shape().to_vec()
}

/// Penalty-reduced focal loss over the center map.
pub fn center_loss(p: &Tensor, targets: &TargetMaps, params: &FocalParams) -> Result<(f64, Tensor)> {
    same_shape(p, &map_shape(targets))?;
    let k = targets.normalizer();
    let (g, b) = (params.gamma, params.beta);
    let mut loss = 0.0;
    let mut grad = vec![0.0; p.len()];
    for (i, &raw) in p.data().iter().enumerate() {
        let q = raw.clamp(EPS, 1.0 - EPS);
        let inside = raw == q;
        if targets.pos_mask[i] {
            let one_m = 1.0 - q;
            let a = one_m.powf(g);
            loss += -a * q.ln();
            if inside {
                let da = if g == 0.0 { 0.0 } else { -g * one_m.powf(g - 1.0) };
                grad[i] = (-da * q.ln() - a / q) / k;
            }
        } else {
            let m = targets.penalty.data()[i];
            let reduce = (1.0 - m).powf(b);
            if reduce == 0.0 {
                continue;
            }
            let a = q.powf(g) * reduce;
            let ce = -(1.0 - q).ln();
            loss += a * ce;
            if inside {
                let da = if g == 0.0 { 0.0 } else { g * q.powf(g - 1.0) * reduce };
                grad[i] = (da * ce + a / (1.0 - q)) / k;
            }
        }
    }
    Ok((loss / k, Tensor::new(p.shape().to_vec(), grad)?))
}

/// L1 on log-height at positive cells.
pub fn scale_loss(pred_log_h: &Tensor, targets: &TargetMaps) -> Result<(f64, Tensor)> {
    same_shape(pred_log_h, &map_shape(targets))?;
    let k = targets.normalizer();
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred_log_h.len()];
    for i in targets.positives() {
        let r = pred_log_h.data()[i] - targets.log_height.data()[i];
        loss += r.abs();
        grad[i] = if r > 0.0 {
            1.0 / k
        } else if r < 0.0 {
            -1.0 / k
        } else {
            0.0
        };
    }
    Ok((loss / k, Tensor::new(pred_log_h.shape().to_vec(), grad)?))
}

fn smooth_l1(r: f64) -> (f64, f64) {
    if r.abs() < 1.0 {
        (0.5 * r * r, r)
    } else {
        (r.abs() - 0.5, r.signum())
    }
}

/// Smooth-L1 (transition at 1) on both offset channels of positive cells.
pub fn offset_loss(pred_offset: &Tensor, targets: &TargetMaps) -> Result<(f64, Tensor)> {
    same_shape(pred_offset, targets.offset.shape())?;
    let k = targets.normalizer();
    let plane = targets.pos_mask.len();
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred_offset.len()];
    for i in targets.positives() {
        for ch in 0..2 {
            let idx = ch * plane + i;
            let (l, d) = smooth_l1(pred_offset.data()[idx] - targets.offset.data()[idx]);
            loss += l / 2.0;
            grad[idx] = d / 2.0 / k;
        }
    }
    Ok((loss / k, Tensor::new(pred_offset.shape().to_vec(), grad)?))
}

/// Predicted maps of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FdnPrediction {
    pub center: Tensor,
    pub log_height: Tensor,
    pub offset: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FdnLoss {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub off: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdnGradients {
    pub center: Tensor,
    pub log_height: Tensor,
    pub offset: Tensor,
}

/// `lambda_r * L_reg + lambda_c * L_cls + lambda_o * L_off`.
pub fn fdn_loss(
    pred: &FdnPrediction,
    targets: &TargetMaps,
    weights: &LossWeights,
    params: &FocalParams,
) -> Result<(FdnLoss, FdnGradients)> {
    let (cls, gc) = center_loss(&pred.center, targets, params)?;
    let (reg, gr) = scale_loss(&pred.log_height, targets)?;
    let (off, go) = offset_loss(&pred.offset, targets)?;
    let scale = |t: Tensor, w: f64| -> Result<Tensor> {
        let data = t.data().iter().map(|v| v * w).collect();
        Tensor::new(t.shape().to_vec(), data)
    };
    let total = weights.lambda_r * reg + weights.lambda_c * cls + weights.lambda_o * off;
    Ok((
        FdnLoss { total, cls, reg, off },
        FdnGradients {
            center: scale(gc, weights.lambda_c)?,
            log_height: scale(gr, weights.lambda_r)?,
            offset: scale(go, weights.lambda_o)?,
        },
    ))
}

/// Mean binary cross-entropy and its gradient w.r.t. `p`.
pub fn bce_loss(p: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>)> {
    if p.is_empty() {
        return Err(Error::Empty("binary cross-entropy over zero samples"));
    }
    if p.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "bce probabilities vs labels",
            left: p.len(),
            right: labels.len(),
        });
    }
    let n = p.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(p.len());
    for (&raw, &y) in p.iter().zip(labels) {
        let q = raw.clamp(EPS, 1.0 - EPS);
        loss += -(y * q.ln() + (1.0 - y) * (1.0 - q).ln());
        grad.push(if raw == q {
            (-y / q + (1.0 - y) / (1.0 - q)) / n
        } else {
            0.0
        });
    }
    Ok((loss / n, grad))
}
