//! AdamW with cosine decay and global-norm clipping.

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub peak_lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-4,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    /// Learning rates of the full-size runs, kept as named presets.
    pub const LR_LIBERO: f64 = 6e-5;
    pub const LR_ROBOTWIN: f64 = 1e-4;

    pub fn validate(&self) -> Result<()> {
        let ok = self.peak_lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("optimizer settings out of range: {self:?}")))
        }
    }
}

/// `peak * (1 + cos(pi * step / total)) / 2`, reaching 0 at `step = total`.
pub fn cosine_lr(peak: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return peak;
    }
    let f = (step.min(total) as f64) / total as f64;
    0.5 * peak * (1.0 + (PI * f).cos())
}

/// Gradients for one parameter store.
pub struct GradGroup<'a> {
    pub store: &'a mut ParamStore,
    pub grads: Vec<(ParamId, Tensor)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptStats {
    pub grad_norm: f64,
    pub lr: f64,
    pub clip_scale: f64,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: OptimizerConfig,
    total_steps: usize,
    step: usize,
    moments: HashMap<(usize, usize), (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            total_steps,
            step: 0,
            moments: HashMap::new(),
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.cfg.peak_lr, self.step, self.total_steps)
    }

    /// Clips all groups jointly, then applies one bias-corrected AdamW update.
    /// Moments are keyed by (group position, parameter index), so callers must
    /// pass groups in a stable order.
    pub fn step(&mut self, groups: &mut [GradGroup<'_>]) -> OptStats {
        let sq: f64 = groups
            .iter()
            .flat_map(|g| g.grads.iter())
            .map(|(_, t)| t.data().iter().map(|x| x * x).sum::<f64>())
            .sum();
        let grad_norm = sq.sqrt();
        let clip_scale = match self.cfg.clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (gi, group) in groups.iter_mut().enumerate() {
            for (id, grad) in &group.grads {
                let param = group.store.get_mut(*id);
                assert_eq!(param.shape(), grad.shape(), "gradient shape for {}", id.index());
                let (m, v) = self
                    .moments
                    .entry((gi, id.index()))
                    .or_insert_with(|| (vec![0.0; grad.numel()], vec![0.0; grad.numel()]));
                for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                    let g = g * clip_scale;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + self.cfg.eps);
                    *p -= lr * (update + self.cfg.weight_decay * *p);
                }
            }
        }
        OptStats { grad_norm, lr, clip_scale }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: Vec<f64>) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(values));
        (s, id)
    }

    fn plain(lr: f64) -> OptimizerConfig {
        OptimizerConfig {
            peak_lr: lr,
            weight_decay: 0.0,
            clip_norm: None,
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let (mut s, id) = store(vec![1.0, -2.0, 3.5]);
        let before = s.clone();
        let mut opt = AdamW::new(plain(1e-2), 10).unwrap();
        for _ in 0..3 {
            opt.step(&mut [GradGroup { store: &mut s, grads: vec![(id, Tensor::zeros(vec![3]))] }]);
        }
        assert!(s.bitwise_eq(&before));
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let g = [0.5, -2.0, 1e-3];
        let (mut s, id) = store(vec![1.0, 1.0, 1.0]);
        let lr = 0.1;
        let mut opt = AdamW::new(plain(lr), 0).unwrap();
        opt.step(&mut [GradGroup { store: &mut s, grads: vec![(id, Tensor::vector(g.to_vec()))] }]);
        for (i, &gi) in g.iter().enumerate() {
            // m_hat = g, v_hat = g^2 after bias correction
            let m_hat = (0.1 * gi) / (1.0 - 0.9);
            let v_hat = (0.001 * gi * gi) / (1.0 - 0.999);
            let want = 1.0 - lr * m_hat / (v_hat.sqrt() + 1e-8);
            assert!((s.get(id).data()[i] - want).abs() < 1e-12, "{i}");
        }
    }

    #[test]
    fn clipping_rescales_to_ceiling() {
        let (mut s, id) = store(vec![0.0, 0.0]);
        let cfg = OptimizerConfig { clip_norm: Some(1.0), ..plain(1e-3) };
        let mut opt = AdamW::new(cfg, 0).unwrap();
        let stats = opt.step(&mut [GradGroup { store: &mut s, grads: vec![(id, Tensor::vector(vec![6.0, 8.0]))] }]);
        assert!((stats.grad_norm - 10.0).abs() < 1e-12);
        assert!((stats.clip_scale - 0.1).abs() < 1e-12);
        let (m, v) = &opt.moments[&(0, 0)];
        assert!((m[0] - 0.1 * 0.6).abs() < 1e-12 && (m[1] - 0.1 * 0.8).abs() < 1e-12);
        assert!((v[0] - 0.001 * 0.36).abs() < 1e-15);
    }

    #[test]
    fn decoupled_weight_decay() {
        let (mut s, id) = store(vec![2.0]);
        let cfg = OptimizerConfig { weight_decay: 0.01, ..plain(0.5) };
        let mut opt = AdamW::new(cfg, 0).unwrap();
        opt.step(&mut [GradGroup { store: &mut s, grads: vec![(id, Tensor::vector(vec![0.0]))] }]);
        assert!((s.get(id).data()[0] - (2.0 - 0.5 * 0.01 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(3e-4, 0, 100), 3e-4);
        assert!((cosine_lr(3e-4, 50, 100) - 1.5e-4).abs() < 1e-18);
        assert!(cosine_lr(3e-4, 100, 100).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let lr = cosine_lr(1.0, s, 100);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn rejects_bad_config() {
        assert!(AdamW::new(OptimizerConfig { peak_lr: 0.0, ..OptimizerConfig::default() }, 1).is_err());
        assert!(AdamW::new(OptimizerConfig { beta2: 1.0, ..OptimizerConfig::default() }, 1).is_err());
    }
}
