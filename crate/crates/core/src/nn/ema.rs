//! Mean-teacher weight averaging.

use super::params::ParamSet;
use crate::error::{Error, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.999;

/// Exponential moving average of a parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    shadow: ParamSet,
    momentum: f64,
    steps: u64,
}

impl EmaState {
    /// Shadow initialized to a copy of `params`.
    pub fn new(params: &ParamSet, momentum: f64) -> Result<Self> {
        Self::with_shadow(params.detached(), momentum)
    }

    pub fn with_shadow(shadow: ParamSet, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("EMA momentum {momentum} not in [0, 1]")));
        }
        Ok(EmaState {
            shadow,
            momentum,
            steps: 0,
        })
    }

    pub fn shadow(&self) -> &ParamSet {
        &self.shadow
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// `shadow <- m * shadow + (1 - m) * params`, elementwise. Entries that
    /// already equal the parameter are left bit-identical.
    pub fn update(&mut self, params: &ParamSet) -> Result<()> {
        if !self.shadow.same_layout(params) {
            return Err(Error::InvalidArgument(
                "EMA shadow and parameters have different layouts".into(),
            ));
        }
        let m = self.momentum;
        for ((_, s), (_, p)) in self.shadow.iter_mut().zip(params.iter()) {
            for (sv, &pv) in s.data_mut().iter_mut().zip(p.data()) {
                if *sv != pv {
                    *sv = m * *sv + (1.0 - m) * pv;
                }
            }
        }
        self.steps += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    fn scalar(x: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(x));
        p
    }

    fn value(e: &EmaState) -> f64 {
        e.shadow().get("w").unwrap().data()[0]
    }

    #[test]
    fn hand_recurrence() {
        let mut e = EmaState::with_shadow(scalar(0.0), 0.5).unwrap();
        let mut seen = Vec::new();
        for x in [1.0, 2.0, 3.0] {
            e.update(&scalar(x)).unwrap();
            seen.push(value(&e));
        }
        assert_eq!(seen, vec![0.5, 1.25, 2.125]);
    }

    #[test]
    fn fixed_point_is_exact() {
        let p = scalar(0.1234567);
        let mut e = EmaState::new(&p, DEFAULT_MOMENTUM).unwrap();
        for _ in 0..100 {
            e.update(&p).unwrap();
            assert_eq!(value(&e).to_bits(), 0.1234567f64.to_bits());
        }
    }

    #[test]
    fn constant_params_attract_the_shadow() {
        let mut e = EmaState::with_shadow(scalar(5.0), 0.9).unwrap();
        for _ in 0..400 {
            e.update(&scalar(-1.0)).unwrap();
        }
        assert!((value(&e) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_momentum_copies() {
        let mut e = EmaState::with_shadow(scalar(3.0), 0.0).unwrap();
        e.update(&scalar(0.7)).unwrap();
        assert_eq!(value(&e), 0.7);
    }

    #[test]
    fn layout_mismatch_is_an_error() {
        let mut e = EmaState::new(&scalar(1.0), 0.5).unwrap();
        let mut other = scalar(1.0);
        other.insert("extra", Tensor::scalar(0.0));
        assert!(e.update(&other).is_err());
    }
}
