//! AdamW: Adam with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, NnError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Optimizer state: per-parameter first and second moments plus the step count.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter in `params`.
    ///
    /// `param ← param − lr·wd·param` is applied separately from the
    /// bias-corrected Adam step. Moments are kept in binary64.
    pub fn step<F: Scalar>(
        &mut self,
        params: &mut ParamStore<F>,
        grads: &BTreeMap<String, Tensor<F>>,
    ) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| NnError::MissingGradient(name.clone()))?;
            if g.shape() != p.shape() {
                return shape_err(
                    "adamw",
                    format!("{name}: grad {:?} vs param {:?}", g.shape(), p.shape()),
                );
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = grads[name].data();
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.as_f64();
                let mut x = w.as_f64();
                x -= c.lr * c.weight_decay * x;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                x -= c.lr * mhat / (vhat.sqrt() + c.eps);
                *w = F::of(x);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_f64(&[values.len()], values).unwrap());
        s
    }

    fn grads(values: &[f64]) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("w".to_string(), Tensor::from_f64(&[values.len()], values).unwrap())])
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = store(&[1.0, -2.0, 3.5]);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..5 {
            opt.step(&mut p, &grads(&[0.0; 3])).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data(), &[1.0, -2.0, 3.5]);
        assert_eq!(opt.step_count(), 5);
    }

    #[test]
    fn decoupled_decay_shrinks_by_lr_times_wd() {
        let mut p = store(&[1.0, -2.0, 3.5]);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.01,
            weight_decay: 0.1,
            ..Default::default()
        });
        opt.step(&mut p, &grads(&[0.0; 3])).unwrap();
        for (got, want) in p.get("w").unwrap().data().iter().zip([1.0, -2.0, 3.5]) {
            assert!((got - want * 0.999).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let lr = 1e-3;
        let mut p = store(&[0.0]);
        let mut opt = AdamW::new(AdamWConfig {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..1000 {
            opt.step(&mut p, &grads(&[0.37])).unwrap();
            let now = p.get("w").unwrap().data()[0];
            last_step = prev - now;
            prev = now;
        }
        assert!((last_step - lr).abs() / lr < 0.01, "{last_step}");
    }

    #[test]
    fn missing_gradient_is_named() {
        let mut p = store(&[1.0]);
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt.step(&mut p, &BTreeMap::new()).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(opt.step_count(), 0);
    }
}
