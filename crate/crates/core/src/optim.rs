//! AdamW: Adam with decoupled weight decay.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::autodiff::ParamId;
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimError {
    #[error("parameter {id:?}: gradient dims {grad:?} do not match parameter dims {param:?}")]
    ShapeMismatch {
        id: ParamId,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("parameter {0:?}: non-finite gradient")]
    NonFiniteGradient(ParamId),
    #[error("learning rate must be non-negative and finite, got {0}")]
    BadLearningRate(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
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
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First/second moments of one parameter plus its own step count, so that
/// parameters that only receive gradients on some iterations get the right
/// bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub moments: BTreeMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            moments: BTreeMap::new(),
        }
    }

    /// Update one parameter in place. `weight_decay` overrides the config
    /// value (parameter groups that must not decay pass 0).
    pub fn step_param(
        &mut self,
        id: ParamId,
        param: &mut Tensor,
        grad: &Tensor,
        lr: f64,
        weight_decay: f64,
    ) -> Result<(), OptimError> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(OptimError::BadLearningRate(lr));
        }
        if param.dims() != grad.dims() {
            return Err(OptimError::ShapeMismatch {
                id,
                param: param.dims().to_vec(),
                grad: grad.dims().to_vec(),
            });
        }
        if !grad.all_finite() {
            return Err(OptimError::NonFiniteGradient(id));
        }
        let AdamWConfig { beta1, beta2, eps, .. } = self.config;
        let st = self.moments.entry(id).or_insert_with(|| Moments {
            m: Tensor::zeros(param.dims()),
            v: Tensor::zeros(param.dims()),
            step: 0,
        });
        st.step += 1;
        let bc1 = 1.0 - math::powf(beta1, st.step as f64);
        let bc2 = 1.0 - math::powf(beta2, st.step as f64);
        let (m, v) = (st.m.data_mut(), st.v.data_mut());
        let (p, g) = (param.data_mut(), grad.data());
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * weight_decay * p[i];
            p[i] -= lr * mhat / (math::sqrt(vhat) + eps);
        }
        Ok(())
    }

    /// Update every parameter that has a gradient, using the configured
    /// learning rate and weight decay.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<ParamId, Tensor>,
        grads: &BTreeMap<ParamId, Tensor>,
    ) -> Result<(), OptimError> {
        // Validate everything first so a bad gradient leaves all state untouched.
        for (id, g) in grads {
            if let Some(p) = params.get(id) {
                if p.dims() != g.dims() {
                    return Err(OptimError::ShapeMismatch {
                        id: *id,
                        param: p.dims().to_vec(),
                        grad: g.dims().to_vec(),
                    });
                }
            }
            if !g.all_finite() {
                return Err(OptimError::NonFiniteGradient(*id));
            }
        }
        let (lr, wd) = (self.config.lr, self.config.weight_decay);
        for (id, g) in grads {
            if let Some(p) = params.get_mut(id) {
                self.step_param(*id, p, g, lr, wd)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn single(p: f64, g: f64, cfg: AdamWConfig, steps: usize) -> f64 {
        let mut opt = AdamW::new(cfg);
        let mut t = Tensor::scalar(p);
        for _ in 0..steps {
            opt.step_param(ParamId(0), &mut t, &Tensor::scalar(g), cfg.lr, cfg.weight_decay)
                .unwrap();
        }
        t.item()
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        assert_eq!(single(1.25, 0.0, cfg, 10), 1.25);
    }

    #[test]
    fn single_step_hand_evaluated() {
        // m = 0.1, v = 0.001, mhat = 1, vhat = 1 -> p = 1 - 0.1 / (1 + 1e-8)
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let p = single(1.0, 1.0, cfg, 1);
        assert!((p - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p - 0.9).abs() < 1e-8);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg);
        let mut t = Tensor::vector(vec![0.0, 0.0]).unwrap();
        let g = Tensor::vector(vec![3.0, -0.2]).unwrap();
        let mut last = t.clone();
        for _ in 0..200 {
            last = t.clone();
            opt.step_param(ParamId(0), &mut t, &g, cfg.lr, 0.0).unwrap();
        }
        let d0 = t.data()[0] - last.data()[0];
        let d1 = t.data()[1] - last.data()[1];
        assert!(d0 < 0.0 && d1 > 0.0);
        assert!((d0.abs() - 0.01).abs() < 1e-6 && (d1.abs() - 0.01).abs() < 1e-6);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let cfg = AdamWConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert_eq!(single(0.75, 2.0, cfg, 5), 0.75);
    }

    #[test]
    fn rejects_mismatch_and_non_finite() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = Tensor::vector(vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            opt.step_param(ParamId(3), &mut p, &Tensor::scalar(1.0), 0.1, 0.0),
            Err(OptimError::ShapeMismatch { .. })
        ));
        let mut params = BTreeMap::new();
        params.insert(ParamId(0), p.clone());
        let mut bad = Tensor::vector(vec![1.0, 1.0]).unwrap();
        bad.data_mut()[1] = f64::NAN;
        let mut grads = BTreeMap::new();
        grads.insert(ParamId(0), bad);
        assert!(matches!(
            opt.step(&mut params, &grads),
            Err(OptimError::NonFiniteGradient(_))
        ));
        assert_eq!(params[&ParamId(0)], p);
    }
}
