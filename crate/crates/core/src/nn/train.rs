//! Training loop: detection loss step, weight averaging, then a detached
//! suppression-head step on the detections of the same forward pass.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ema::{EmaState, DEFAULT_MOMENTUM};
use super::model::{build_fdn, fdn_param_names, init_params, FdnOutput};
use super::optim::{warmup_lr, Optimizer, OptimizerKind};
use super::params::ParamSet;
use super::tape::Tape;
use super::tensor::Tensor;
use crate::decode::{decode, DecodeConfig};
use crate::encode::{encode_targets, TargetMaps};
use crate::error::{Error, Result};
use crate::geometry::GridShape;
use crate::io::checkpoint::{Checkpoint, CheckpointMeta};
use crate::io::dataset::Sample;
use crate::loss::{fdn_loss, FocalParams, LossWeights};
use crate::suppress::{make_suppression_labels, names as sup_names, train_suppression_step, RoiAlignConfig};

/// IoU at which a training detection counts as a true pedestrian.
pub const LABEL_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_iters: usize,
    pub seed: u64,
    pub ema_momentum: f64,
    pub optimizer: OptimizerKind,
    pub weights: LossWeights,
    pub focal: FocalParams,
    /// Train the suppression head after every detection step.
    pub suppression: bool,
    pub suppression_lr: f64,
    /// Decoding of the detections the suppression head is trained on.
    pub suppression_decode: DecodeConfig,
    pub roi: RoiAlignConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 4,
            lr: 4e-3,
            warmup_iters: 200,
            seed: 0,
            ema_momentum: DEFAULT_MOMENTUM,
            optimizer: OptimizerKind::adam(),
            weights: LossWeights::default(),
            focal: FocalParams::default(),
            suppression: true,
            suppression_lr: 1e-3,
            suppression_decode: DecodeConfig {
                max_detections: 32,
                ..DecodeConfig::default()
            },
            roi: RoiAlignConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.lr >= 0.0
            && self.lr.is_finite()
            && self.suppression_lr >= 0.0
            && self.suppression_lr.is_finite();
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid training config {self:?}")));
        }
        self.suppression_decode.validate()
    }
}

/// Mean losses over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_fdn: f64,
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_off: f64,
    /// Mean suppression BCE over the images that had labelled detections.
    pub l_sup: f64,
}

impl fmt::Display for EpochStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} l_cls={:.6} l_reg={:.6} l_off={:.6} l_sup={:.6}",
            self.epoch, self.l_cls, self.l_reg, self.l_off, self.l_sup
        )
    }
}

fn image_shape(samples: &[Sample]) -> Result<(usize, usize)> {
    let first = samples.first().ok_or(Error::Empty("training set"))?;
    let s = first.image.shape();
    let (h, w) = (s[0], s[1]);
    if let Some(bad) = samples.iter().find(|x| x.image.shape() != [h, w]) {
        return Err(Error::InvalidArgument(format!(
            "image `{}` is {:?}, expected [{h}, {w}]",
            bad.image_id,
            bad.image.shape()
        )));
    }
    Ok((h, w))
}

/// Stacks `[H, W]` images into `[N, 1, H, W]`.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Tensor>, h: usize, w: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for img in images {
        img.check_shape(&[h, w])?;
        data.extend_from_slice(img.data());
        n += 1;
    }
    Tensor::new(vec![n, 1, h, w], data)
}

/// Trains from `init` (or a fresh seeded model) and returns the final
/// checkpoint. `on_epoch` is called after each epoch.
pub fn train(
    samples: &[Sample],
    cfg: &TrainConfig,
    init: Option<&Checkpoint>,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Checkpoint> {
    cfg.validate()?;
    let (h, w) = image_shape(samples)?;
    let grid = GridShape::new(h, w, GridShape::DEFAULT_STRIDE)?;
    let targets: Vec<TargetMaps> = samples
        .iter()
        .map(|s| encode_targets(&s.annotations, grid))
        .collect::<Result<_>>()?;

    let fresh = init_params(cfg.seed);
    let (mut params, mut ema) = match init {
        Some(c) => {
            if !c.params.same_layout(&fresh) {
                return Err(Error::InvalidArgument("initial checkpoint has a different architecture".into()));
            }
            (c.params.detached(), EmaState::with_shadow(c.ema.detached(), cfg.ema_momentum)?)
        }
        None => {
            let ema = EmaState::new(&fresh, cfg.ema_momentum)?;
            (fresh, ema)
        }
    };
    let fdn_names = fdn_param_names(&params);
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut iteration = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = EpochStats {
            epoch: epoch + 1,
            ..EpochStats::default()
        };
        let mut batches = 0usize;
        let mut sup_count = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let lr = warmup_lr(cfg.lr, cfg.warmup_iters, iteration);
            let out = fdn_step(samples, &targets, batch, (h, w), cfg, &mut params, &mut optimizer, &fdn_names, lr, iteration, &mut sums)?;
            batches += 1;
            if cfg.suppression {
                let sup_lr = warmup_lr(cfg.suppression_lr, cfg.warmup_iters, iteration);
                for (k, &idx) in batch.iter().enumerate() {
                    let s = &samples[idx];
                    let pred = out.prediction(k)?;
                    let dets = decode(
                        &s.image_id,
                        &pred.center,
                        &pred.log_height,
                        &pred.offset,
                        &cfg.suppression_decode,
                        grid,
                    )?;
                    let labels = make_suppression_labels(&dets, &s.annotations, LABEL_IOU);
                    let feats = out.features(k)?;
                    if let Some(l) =
                        train_suppression_step(&feats, &dets, &labels, &mut params, &mut optimizer, sup_lr, &cfg.roi)?
                    {
                        if !l.is_finite() {
                            return Err(Error::NonFiniteLoss { iteration });
                        }
                        sums.l_sup += l;
                        sup_count += 1;
                    }
                }
            }
            // An iteration that moved nothing leaves the average untouched too.
            if lr > 0.0 || (cfg.suppression && cfg.suppression_lr > 0.0) {
                ema.update(&params)?;
            }
            iteration += 1;
        }
        let nb = batches.max(1) as f64;
        let stats = EpochStats {
            epoch: epoch + 1,
            l_fdn: sums.l_fdn / nb,
            l_cls: sums.l_cls / nb,
            l_reg: sums.l_reg / nb,
            l_off: sums.l_off / nb,
            l_sup: if sup_count > 0 { sums.l_sup / sup_count as f64 } else { 0.0 },
        };
        log::info!("{stats}");
        on_epoch(&stats);
    }

    let (prev_iter, prev_epochs) = init.map(|c| (c.meta.iteration, c.meta.epochs)).unwrap_or((0, 0));
    let meta = CheckpointMeta {
        iteration: prev_iter + iteration as u64,
        epochs: prev_epochs + cfg.epochs as u64,
        seed: cfg.seed,
        batch_size: cfg.batch_size as u64,
        lr: cfg.lr,
        warmup_iters: cfg.warmup_iters as u64,
        ema_momentum: cfg.ema_momentum,
        suppression: cfg.suppression,
        optimizer: cfg.optimizer,
    };
    Ok(Checkpoint {
        params: params.detached(),
        ema: ema.shadow().detached(),
        optimizer,
        meta,
        ema_from_params: false,
    })
}

/// One detection-loss step on `batch`. Returns the forward values from
/// before the update and adds the batch-mean losses to `sums`.
#[allow(clippy::too_many_arguments)]
fn fdn_step(
    samples: &[Sample],
    targets: &[TargetMaps],
    batch: &[usize],
    (h, w): (usize, usize),
    cfg: &TrainConfig,
    params: &mut ParamSet,
    optimizer: &mut Optimizer,
    fdn_names: &[String],
    lr: f64,
    iteration: usize,
    sums: &mut EpochStats,
) -> Result<FdnOutput> {
    let images = stack_images(batch.iter().map(|&i| &samples[i].image), h, w)?;
    let mut tape = Tape::new();
    let g = build_fdn(&mut tape, params, &images, true)?;
    let out = FdnOutput::from_graph(&tape, &g);
    let bn = batch.len() as f64;
    let mut seed_c = Vec::with_capacity(out.center.len());
    let mut seed_h = Vec::with_capacity(out.log_height.len());
    let mut seed_o = Vec::with_capacity(out.offset.len());
    let (mut cls, mut reg, mut off, mut total) = (0.0, 0.0, 0.0, 0.0);
    for (k, &idx) in batch.iter().enumerate() {
        let pred = out.prediction(k)?;
        let (l, gr) = fdn_loss(&pred, &targets[idx], &cfg.weights, &cfg.focal)?;
        cls += l.cls / bn;
        reg += l.reg / bn;
        off += l.off / bn;
        total += l.total / bn;
        seed_c.extend(gr.center.data().iter().map(|v| v / bn));
        seed_h.extend(gr.log_height.data().iter().map(|v| v / bn));
        seed_o.extend(gr.offset.data().iter().map(|v| v / bn));
    }
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss { iteration });
    }
    let grads = tape.backward(&[(g.center, &seed_c), (g.log_height, &seed_h), (g.offset, &seed_o)])?;
    for (name, var) in &g.params {
        if let Some(gr) = grads.get(*var) {
            params.require_mut(name)?.accumulate_grad(gr);
        }
    }
    optimizer.step(params, fdn_names, lr)?;
    for name in fdn_names {
        params.require_mut(name)?.zero_grad();
    }
    sums.l_cls += cls;
    sums.l_reg += reg;
    sums.l_off += off;
    sums.l_fdn += total;
    Ok(out)
}

/// Names of the suppression-head parameters.
pub fn suppression_param_names() -> Vec<String> {
    sup_names::ALL.iter().map(|s| s.to_string()).collect()
}
