//! Checkpoints are tensor files with reserved array names: `param.<name>`
//! for raw weights, `ema.<name>` for the averaged weights, `opt.<entry>`
//! for optimizer state and a single `meta` vector.

use std::collections::BTreeMap;
use std::path::Path;

use super::tensorfile::{decode_tensors, encode_tensors, read_tensor_file, write_tensor_file};
use crate::error::{Error, Result};
use crate::nn::optim::{Optimizer, OptimizerKind};
use crate::nn::params::ParamSet;
use crate::nn::tensor::Tensor;

const META_VERSION: f64 = 1.0;
const META_LEN: usize = 14;

/// Training counters and a record of the configuration that produced the
/// checkpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta {
    pub iteration: u64,
    pub epochs: u64,
    pub seed: u64,
    pub batch_size: u64,
    pub lr: f64,
    pub warmup_iters: u64,
    pub ema_momentum: f64,
    pub suppression: bool,
    pub optimizer: OptimizerKind,
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        CheckpointMeta {
            iteration: 0,
            epochs: 0,
            seed: 0,
            batch_size: 0,
            lr: 0.0,
            warmup_iters: 0,
            ema_momentum: crate::nn::ema::DEFAULT_MOMENTUM,
            suppression: true,
            optimizer: OptimizerKind::adam(),
        }
    }
}

impl CheckpointMeta {
    fn to_tensor(self) -> Tensor {
        let (kind, b1, b2, eps) = match self.optimizer {
            OptimizerKind::Sgd => (0.0, 0.0, 0.0, 0.0),
            OptimizerKind::Adam { beta1, beta2, eps } => (1.0, beta1, beta2, eps),
        };
        let v = vec![
            META_VERSION,
            self.iteration as f64,
            self.epochs as f64,
            (self.seed & 0xffff_ffff) as f64,
            (self.seed >> 32) as f64,
            self.batch_size as f64,
            self.lr,
            self.warmup_iters as f64,
            self.ema_momentum,
            if self.suppression { 1.0 } else { 0.0 },
            kind,
            b1,
            b2,
            eps,
        ];
        Tensor::new(vec![META_LEN], v).expect("fixed length")
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        let v = t.data();
        if t.shape() != [META_LEN] || v[0] != META_VERSION {
            return Err(Error::Format(format!("unsupported `meta` array of shape {:?}", t.shape())));
        }
        let optimizer = match v[10] {
            0.0 => OptimizerKind::Sgd,
            1.0 => OptimizerKind::Adam {
                beta1: v[11],
                beta2: v[12],
                eps: v[13],
            },
            k => return Err(Error::Format(format!("unknown optimizer code {k} in `meta`"))),
        };
        Ok(CheckpointMeta {
            iteration: v[1] as u64,
            epochs: v[2] as u64,
            seed: (v[3] as u64) | ((v[4] as u64) << 32),
            batch_size: v[5] as u64,
            lr: v[6],
            warmup_iters: v[7] as u64,
            ema_momentum: v[8],
            suppression: v[9] != 0.0,
            optimizer,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub ema: ParamSet,
    pub optimizer: Optimizer,
    pub meta: CheckpointMeta,
    /// Set when the file had no `ema.*` arrays and `ema` was copied from
    /// `params`.
    pub ema_from_params: bool,
}

impl Checkpoint {
    /// Fresh checkpoint whose EMA equals the raw weights.
    pub fn new(params: ParamSet, meta: CheckpointMeta) -> Self {
        Checkpoint {
            ema: params.detached(),
            params,
            optimizer: Optimizer::new(meta.optimizer),
            meta,
            ema_from_params: false,
        }
    }

    pub fn to_arrays(&self) -> Vec<(String, Tensor)> {
        let plain = |t: &Tensor| Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid");
        let mut out: Vec<(String, Tensor)> = Vec::new();
        out.extend(self.params.iter().map(|(n, t)| (format!("param.{n}"), plain(t))));
        out.extend(self.ema.iter().map(|(n, t)| (format!("ema.{n}"), plain(t))));
        out.extend(self.optimizer.export().into_iter().map(|(n, t)| (format!("opt.{n}"), t)));
        out.push(("meta".to_string(), self.meta.to_tensor()));
        out
    }

    pub fn from_arrays(arrays: Vec<(String, Tensor)>) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut ema = ParamSet::new();
        let mut opt = BTreeMap::new();
        let mut meta = None;
        for (name, t) in arrays {
            if let Some(n) = name.strip_prefix("param.") {
                params.insert(n, t);
            } else if let Some(n) = name.strip_prefix("ema.") {
                ema.insert(n, t);
            } else if let Some(n) = name.strip_prefix("opt.") {
                opt.insert(n.to_string(), t);
            } else if name == "meta" {
                meta = Some(CheckpointMeta::from_tensor(&t)?);
            } else {
                return Err(Error::Format(format!("unexpected checkpoint array `{name}`")));
            }
        }
        if params.is_empty() {
            return Err(Error::Format("checkpoint has no `param.*` arrays".into()));
        }
        let meta = meta.ok_or_else(|| Error::Format("checkpoint has no `meta` array".into()))?;
        let ema_from_params = ema.is_empty();
        if ema_from_params {
            log::warn!("checkpoint has no ema.* arrays; initializing the average from the raw weights");
            ema = params.detached();
        } else if !ema.same_layout(&params) {
            return Err(Error::Format("`ema.*` arrays do not match `param.*` arrays".into()));
        }
        let optimizer = Optimizer::import(meta.optimizer, &opt)?;
        Ok(Checkpoint {
            params,
            ema,
            optimizer,
            meta,
            ema_from_params,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode_tensors(&self.to_arrays())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_arrays(decode_tensors(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_tensor_file(path, &self.to_arrays())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_arrays(read_tensor_file(path)?)
    }
}
