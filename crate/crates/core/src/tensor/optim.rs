//! AdamW with decoupled weight decay and the learning-rate schedules used by
//! the trainers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{DiveError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Learning rate as a function of the 0-based step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// Linear warmup to `peak` over `warmup_ratio * total_steps` steps, then
    /// cosine decay to `peak * min_ratio` at the last step.
    Cosine {
        peak: f64,
        min_ratio: f64,
        warmup_ratio: f64,
        total_steps: usize,
    },
}

impl LrSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Cosine {
                peak,
                min_ratio,
                warmup_ratio,
                total_steps,
            } => {
                let warmup = (warmup_ratio * total_steps as f64).ceil() as usize;
                if step < warmup {
                    return peak * (step + 1) as f64 / warmup as f64;
                }
                let span = total_steps.saturating_sub(warmup).saturating_sub(1).max(1);
                let progress = ((step - warmup) as f64 / span as f64).min(1.0);
                let floor = peak * min_ratio;
                floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LrSchedule::Constant { lr } => lr > 0.0 && lr.is_finite(),
            LrSchedule::Cosine {
                peak,
                min_ratio,
                warmup_ratio,
                ..
            } => peak > 0.0 && (0.0..=1.0).contains(&min_ratio) && (0.0..1.0).contains(&warmup_ratio),
        };
        if ok {
            Ok(())
        } else {
            Err(DiveError::Parameter(format!("invalid learning-rate schedule {self:?}")))
        }
    }
}

/// First/second moments per trainable parameter plus the step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        Some((self.m.get(name)?.as_slice(), self.v.get(name)?.as_slice()))
    }

    /// One AdamW update of every trainable parameter, then zeroes grads.
    ///
    /// Frozen parameters are untouched. A trainable parameter without a
    /// gradient buffer is a state error and nothing is updated.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if let Some((name, _)) = params
            .iter()
            .find(|(_, t)| t.requires_grad() && t.grad().is_none())
        {
            return Err(DiveError::State(format!("parameter `{name}` has no gradient")));
        }
        let c = self.config;
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - lr * c.weight_decay;
        // Compute every update first so a non-finite result leaves the
        // parameters and moments untouched.
        let mut updates = Vec::new();
        for (name, p) in params.iter() {
            if !p.requires_grad() {
                continue;
            }
            let n = p.numel();
            let grad = p.grad().expect("checked above");
            let zeros = vec![T::zero(); n];
            let m = self.m.get(name).unwrap_or(&zeros);
            let v = self.v.get(name).unwrap_or(&zeros);
            let mut new_w = Vec::with_capacity(n);
            let mut new_m = Vec::with_capacity(n);
            let mut new_v = Vec::with_capacity(n);
            for (i, w) in p.data().iter().enumerate() {
                let g = grad[i].as_f64();
                let mi = c.beta1 * m[i].as_f64() + (1.0 - c.beta1) * g;
                let vi = c.beta2 * v[i].as_f64() + (1.0 - c.beta2) * g * g;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                let nw = T::of(w.as_f64() * decay - lr * update);
                if !nw.is_finite() {
                    return Err(DiveError::Numeric(format!("parameter `{name}` would become non-finite")));
                }
                new_w.push(nw);
                new_m.push(T::of(mi));
                new_v.push(T::of(vi));
            }
            updates.push((name.to_string(), new_w, new_m, new_v));
        }
        self.step += 1;
        for (name, w, m, v) in updates {
            let p = params.get_mut(&name)?;
            p.data_mut().copy_from_slice(&w);
            p.zero_grad();
            self.m.insert(name.clone(), m);
            self.v.insert(name, v);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(w: f64, g: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        let mut t = Tensor::from_f64(&[1], &[w]).unwrap();
        t.set_requires_grad(true);
        t.accumulate_grad(&[g]).unwrap();
        p.insert("w", t);
        p
    }

    #[test]
    fn decay_only() {
        let mut p = store(1.0, 0.0);
        let mut opt = OptimizerState::new(AdamWConfig {
            weight_decay: 0.01,
            ..Default::default()
        });
        opt.step(&mut p, 0.1).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.999).abs() < 1e-15);
        assert_eq!(p.get("w").unwrap().grad().unwrap(), &[0.0]);
    }

    #[test]
    fn moves_against_gradient() {
        for g in [0.5, -2.0] {
            let mut p = store(1.0, g);
            let mut opt = OptimizerState::new(AdamWConfig::default());
            opt.step(&mut p, 0.01).unwrap();
            let w = p.get("w").unwrap().data()[0];
            assert_eq!((w - 1.0).signum(), -g.signum());
        }
    }

    #[test]
    fn missing_grad_is_state_error() {
        let mut p = ParamStore::<f32>::new();
        let mut t = Tensor::zeros(&[2]);
        t.set_requires_grad(true);
        p.insert("w", t);
        let mut opt = OptimizerState::new(AdamWConfig::default());
        assert!(matches!(opt.step(&mut p, 0.1), Err(DiveError::State(_))));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule::Cosine {
            peak: 1e-4,
            min_ratio: 0.1,
            warmup_ratio: 0.03,
            total_steps: 100,
        };
        assert!((s.lr_at(0) - 1e-4 / 3.0).abs() < 1e-18);
        assert!((s.lr_at(3) - 1e-4).abs() < 1e-18);
        assert!((s.lr_at(99) - 1e-5).abs() < 1e-18);
        assert!(s.lr_at(50) < 1e-4 && s.lr_at(50) > 1e-5);
    }
}
