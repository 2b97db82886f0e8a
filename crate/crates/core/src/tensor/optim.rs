use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Precision, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_LR: f64 = 1e-4;

/// Adam with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter name plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn step(
        &self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        state: &mut AdamState,
        precision: Precision,
    ) -> Result<()> {
        for p in params.iter() {
            if !p.frozen && !grads.contains_key(&p.name) {
                return Err(Error::MissingGradient(p.name.clone()));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in params.iter_mut().filter(|p| !p.frozen) {
            let g = &grads[&p.name];
            if g.shape() != p.tensor.shape() {
                return Err(Error::shape(
                    "adamw",
                    format!("gradient shape for `{}`", p.name),
                ));
            }
            let m = state
                .m
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = state
                .v
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let (md, vd, wd) = (m.data_mut(), v.data_mut(), p.tensor.data_mut());
            for i in 0..wd.len() {
                let gi = g.data()[i];
                md[i] = precision.round(self.beta1 * md[i] + (1.0 - self.beta1) * gi);
                vd[i] = precision.round(self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi);
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                let w = wd[i];
                wd[i] = precision
                    .round(w - self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * w));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let mut ps = ParamStore::new();
        ps.add("w", Tensor::vector(vec![1.5, -2.0]), false).unwrap();
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut st = AdamState::default();
        let g = BTreeMap::from([("w".to_string(), Tensor::vector(vec![0.0, 0.0]))]);
        for _ in 0..5 {
            opt.step(&mut ps, &g, &mut st, Precision::F64).unwrap();
        }
        assert_eq!(ps.get("w").unwrap().tensor.data(), &[1.5, -2.0]);
    }

    #[test]
    fn scalar_step_matches_hand_rolled_adamw() {
        // f(w) = w^2 at w = 1 -> g = 2
        let mut ps = ParamStore::new();
        ps.add("w", Tensor::scalar(1.0), false).unwrap();
        let opt = AdamW::default();
        let mut st = AdamState::default();
        let g = BTreeMap::from([("w".to_string(), Tensor::scalar(2.0))]);
        opt.step(&mut ps, &g, &mut st, Precision::F64).unwrap();

        let (lr, b1, b2, eps, wd) = (1e-4_f64, 0.9_f64, 0.999_f64, 1e-8_f64, 0.01_f64);
        let w0 = 1.0_f64;
        let grad = 2.0 * w0;
        let m = (1.0 - b1) * grad;
        let v = (1.0 - b2) * grad * grad;
        let mhat = m / (1.0 - b1);
        let vhat = v / (1.0 - b2);
        let expected = w0 - lr * wd * w0 - lr * mhat / (vhat.sqrt() + eps);
        assert!((ps.get("w").unwrap().tensor.item() - expected).abs() < 1e-8);
    }

    #[test]
    fn frozen_untouched_and_missing_gradient_rejected() {
        let mut ps = ParamStore::new();
        ps.add("w", Tensor::scalar(1.0), false).unwrap();
        ps.add("f", Tensor::scalar(7.0), true).unwrap();
        let opt = AdamW::default();
        let mut st = AdamState::default();
        assert!(matches!(
            opt.step(&mut ps, &BTreeMap::new(), &mut st, Precision::F64),
            Err(Error::MissingGradient(_))
        ));
        let g = BTreeMap::from([("w".to_string(), Tensor::scalar(1.0))]);
        opt.step(&mut ps, &g, &mut st, Precision::F64).unwrap();
        assert_eq!(ps.get("f").unwrap().tensor.item(), 7.0);
        assert_eq!(opt.lr, 1e-4);
    }
}
