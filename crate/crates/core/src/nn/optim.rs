use std::collections::BTreeMap;

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Per-parameter optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    slots: BTreeMap<String, AdamSlot>,
}

/// Linear warm-up to `base` over `warmup_iters`, constant afterwards.
pub fn warmup_lr(base: f64, warmup_iters: usize, iteration: usize) -> f64 {
    if iteration < warmup_iters {
        base * (iteration + 1) as f64 / warmup_iters as f64
    } else {
        base
    }
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            slots: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Applies one update to each named parameter from its gradient buffer.
    /// Parameters without a gradient buffer are left alone.
    pub fn step<S: AsRef<str>>(&mut self, params: &mut ParamSet, names: &[S], lr: f64) -> Result<()> {
        for name in names {
            let name = name.as_ref();
            let p = params.require(name)?;
            let Some(g) = p.grad() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        for name in names {
            let name = name.as_ref();
            let p = params.require_mut(name)?;
            let Some(g) = p.grad().map(<[f64]>::to_vec) else { continue };
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, gi) in p.data_mut().iter_mut().zip(&g) {
                        *x -= lr * gi;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let slot = self.slots.entry(name.to_string()).or_insert_with(|| AdamSlot {
                        m: vec![0.0; g.len()],
                        v: vec![0.0; g.len()],
                        t: 0,
                    });
                    if slot.m.len() != g.len() {
                        return Err(Error::LengthMismatch {
                            what: "optimizer state",
                            left: slot.m.len(),
                            right: g.len(),
                        });
                    }
                    slot.t += 1;
                    let c1 = 1.0 - beta1.powi(slot.t as i32);
                    let c2 = 1.0 - beta2.powi(slot.t as i32);
                    for i in 0..g.len() {
                        slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g[i];
                        slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g[i] * g[i];
                        let mhat = slot.m[i] / c1;
                        let vhat = slot.v[i] / c2;
                        p.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Flattens the state into named tensors (`m.<param>`, `v.<param>`, `t.<param>`).
    pub fn export(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, s) in &self.slots {
            let n = s.m.len();
            out.push((format!("m.{name}"), Tensor::new(vec![n], s.m.clone()).expect("len")));
            out.push((format!("v.{name}"), Tensor::new(vec![n], s.v.clone()).expect("len")));
            out.push((format!("t.{name}"), Tensor::scalar(s.t as f64)));
        }
        out
    }

    /// Inverse of [`Optimizer::export`].
    pub fn import(kind: OptimizerKind, entries: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut opt = Optimizer::new(kind);
        for (key, m) in entries {
            let Some(name) = key.strip_prefix("m.") else { continue };
            let get = |prefix: &str| {
                entries
                    .get(&format!("{prefix}.{name}"))
                    .ok_or_else(|| Error::Format(format!("optimizer state for `{name}` lacks `{prefix}`")))
            };
            let v = get("v")?;
            let t = get("t")?;
            if v.len() != m.len() || t.len() != 1 {
                return Err(Error::Format(format!("inconsistent optimizer state for `{name}`")));
            }
            opt.slots.insert(
                name.to_string(),
                AdamSlot {
                    m: m.data().to_vec(),
                    v: v.data().to_vec(),
                    t: t.data()[0] as u64,
                },
            );
        }
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(x: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(x));
        p
    }

    #[test]
    fn sgd_on_quadratic() {
        let mut p = scalar_param(1.0);
        // f = x^2, df/dx = 2x
        p.require_mut("x").unwrap().accumulate_grad(&[2.0]);
        Optimizer::new(OptimizerKind::Sgd).step(&mut p, &["x"], 0.1).unwrap();
        assert!((p.get("x").unwrap().data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::adam()] {
            let mut p = scalar_param(0.3);
            p.require_mut("x").unwrap().accumulate_grad(&[-1.7]);
            let mut opt = Optimizer::new(kind);
            opt.step(&mut p, &["x"], 0.0).unwrap();
            assert_eq!(p.get("x").unwrap().data()[0].to_bits(), 0.3f64.to_bits());
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = scalar_param(1.0);
        p.require_mut("x").unwrap().accumulate_grad(&[5.0]);
        Optimizer::new(OptimizerKind::adam()).step(&mut p, &["x"], 0.01).unwrap();
        assert!((p.get("x").unwrap().data()[0] - 0.99).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = scalar_param(1.0);
        p.insert("backbone.stem.w", Tensor::scalar(0.0));
        p.require_mut("backbone.stem.w").unwrap().accumulate_grad(&[f64::NAN]);
        let err = Optimizer::new(OptimizerKind::adam())
            .step(&mut p, &["x", "backbone.stem.w"], 0.1)
            .unwrap_err();
        assert!(err.to_string().contains("backbone.stem.w"));
        assert!(err.is_numeric());
    }

    #[test]
    fn warmup_schedule() {
        assert_eq!(warmup_lr(1.0, 4, 0), 0.25);
        assert_eq!(warmup_lr(1.0, 4, 3), 1.0);
        assert_eq!(warmup_lr(1.0, 4, 10), 1.0);
        assert_eq!(warmup_lr(0.5, 0, 0), 0.5);
    }

    #[test]
    fn state_round_trips() {
        let mut p = scalar_param(1.0);
        let mut opt = Optimizer::new(OptimizerKind::adam());
        for _ in 0..3 {
            p.require_mut("x").unwrap().accumulate_grad(&[0.5]);
            opt.step(&mut p, &["x"], 0.1).unwrap();
        }
        let map: BTreeMap<String, Tensor> = opt.export().into_iter().collect();
        assert_eq!(Optimizer::import(OptimizerKind::adam(), &map).unwrap(), opt);
    }
}
