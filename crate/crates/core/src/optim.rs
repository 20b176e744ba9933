//! AdamW with bias correction, decoupled weight decay, and step decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::volume::Volume5;

/// Optimizer hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Decoupled-weight-decay adaptive moment optimizer.
///
/// Per parameter element with gradient `g`:
/// `m <- b1*m + (1-b1)*g`, `v <- b2*v + (1-b2)*g^2`,
/// `x <- x - lr * mhat / (sqrt(vhat) + eps) - lr * wd * x`
/// with `mhat`, `vhat` bias-corrected by step count. Parameters are visited
/// in sorted name order.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamConfig,
    lr: f64,
    step: u64,
    moments: BTreeMap<String, (Volume5, Volume5)>,
}

impl AdamW {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        if cfg.lr <= 0.0 {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                cfg.lr
            )));
        }
        Ok(Self {
            cfg,
            lr: cfg.lr,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    /// Rebuilds an optimizer from checkpointed state.
    pub fn from_state(
        lr: f64,
        step: u64,
        moments: Vec<(String, Volume5, Volume5)>,
    ) -> Result<Self> {
        if lr <= 0.0 {
            return Err(Error::config(format!("invalid checkpoint lr {lr}")));
        }
        let cfg = AdamConfig {
            lr,
            ..AdamConfig::default()
        };
        let mut map = BTreeMap::new();
        for (name, m, v) in moments {
            map.insert(name, (m, v));
        }
        Ok(Self {
            cfg,
            lr,
            step,
            moments: map,
        })
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if lr <= 0.0 {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        self.lr = lr;
        Ok(())
    }

    /// First and second moment buffers for a parameter.
    pub fn moments(&self, name: &str) -> Result<(&Volume5, &Volume5)> {
        self.moments
            .get(name)
            .map(|(m, v)| (m, v))
            .ok_or_else(|| Error::Lookup(name.to_string()))
    }

    /// Lazily creates zero moments for any parameter not yet tracked.
    pub fn ensure_params(&mut self, params: &ParamStore) {
        for (name, entry) in params.iter() {
            self.moments
                .entry(name.to_string())
                .or_insert_with(|| (Volume5::zeros_like(&entry.value), Volume5::zeros_like(&entry.value)));
        }
    }

    /// Applies one update using the gradients currently stored in `params`.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        self.ensure_params(params);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let lr = self.lr;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.cfg;
        for (name, entry) in params.iter_mut() {
            let (m, v) = self
                .moments
                .get_mut(name)
                .expect("ensure_params registered every name");
            let value = entry.value.data_mut();
            let grad = entry.grad.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                md[i] = beta1 * md[i] + (1.0 - beta1) * g;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * g * g;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                let x = value[i];
                value[i] = x - lr * mhat / (vhat.sqrt() + eps) - lr * weight_decay * x;
            }
            entry.value.check_finite()?;
        }
        Ok(())
    }
}

/// Multiplies the base learning rate by `factor` once per `every` epochs.
#[derive(Clone, Copy, Debug)]
pub struct StepDecay {
    pub base_lr: f64,
    pub factor: f64,
    pub every: usize,
}

impl StepDecay {
    pub fn new(base_lr: f64, factor: f64, every: usize) -> Self {
        Self {
            base_lr,
            factor,
            every: every.max(1),
        }
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.base_lr * self.factor.powi((epoch / self.every) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(x: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("x", Volume5::scalar(x).unwrap()).unwrap();
        p
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // Hand-executed update: m=0.1, v=0.001, mhat=1, vhat=1,
        // step = lr * 1 / (1 + eps) ~ lr.
        let mut params = single_param(1.0);
        params
            .accumulate_grad("x", &Volume5::scalar(1.0).unwrap())
            .unwrap();
        let mut opt = AdamW::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        })
        .unwrap();
        opt.step(&mut params).unwrap();
        let x = params.scalar_value("x").unwrap();
        assert!((x - 0.9).abs() < 1e-6, "x = {x}");
    }

    #[test]
    fn decoupled_decay_without_gradient() {
        let mut params = single_param(1.0);
        let mut opt = AdamW::new(AdamConfig {
            lr: 0.1,
            weight_decay: 0.1,
            ..AdamConfig::default()
        })
        .unwrap();
        opt.step(&mut params).unwrap();
        let x = params.scalar_value("x").unwrap();
        assert!((x - (1.0 - 0.01)).abs() < 1e-12, "x = {x}");
    }

    #[test]
    fn deterministic_over_ten_steps() {
        let run = || {
            let mut params = single_param(0.5);
            let mut opt = AdamW::new(AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            })
            .unwrap();
            for i in 0..10 {
                params.zero_grads();
                params
                    .accumulate_grad("x", &Volume5::scalar(0.3 + i as f64 * 0.01).unwrap())
                    .unwrap();
                opt.step(&mut params).unwrap();
            }
            params.scalar_value("x").unwrap()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn non_positive_lr_rejected() {
        let err = AdamW::new(AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        })
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn step_decay_schedule() {
        let sched = StepDecay::new(1e-3, 0.9, 10);
        assert_eq!(sched.lr_at_epoch(0), 1e-3);
        assert_eq!(sched.lr_at_epoch(9), 1e-3);
        assert!((sched.lr_at_epoch(10) - 9e-4).abs() < 1e-18);
        assert!((sched.lr_at_epoch(25) - 1e-3 * 0.81).abs() < 1e-18);
    }
}
