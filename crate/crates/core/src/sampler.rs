//! Current-only Euler denoising of action chunks and the latency harness.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::backbone::MotInput;
use crate::error::{shape_err, Error, Result};
use crate::flow::gaussian_like;
use crate::pfd::{scaled, PfdModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub num_steps: usize,
    /// Only 1.0 (guidance inactive) is accepted.
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 10,
            guidance_scale: 1.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::InvalidConfig("sampler needs at least one step".into()));
        }
        if self.guidance_scale != 1.0 {
            return Err(Error::InvalidConfig(format!(
                "guidance scale {} unsupported; only 1.0 (no guidance) is implemented",
                self.guidance_scale
            )));
        }
        Ok(())
    }
}

/// Action velocity at the current chunk estimate.
pub trait VelocityField {
    fn velocity(&self, actions: &Tensor, tau: f64) -> Result<Tensor>;
}

/// Integrates `field` from `noise` at tau = 0 to tau = 1 in uniform Euler steps.
pub fn euler_integrate(field: &impl VelocityField, noise: Tensor, num_steps: usize) -> Result<Tensor> {
    if num_steps == 0 {
        return Err(Error::InvalidConfig("sampler needs at least one step".into()));
    }
    let dt = 1.0 / num_steps as f64;
    let mut a = noise;
    for k in 0..num_steps {
        let tau = k as f64 * dt;
        let v = field.velocity(&a, tau)?;
        if v.shape() != a.shape() {
            return Err(shape_err("euler_integrate", format!("velocity {:?} for chunk {:?}", v.shape(), a.shape())));
        }
        for (x, dv) in a.data_mut().iter_mut().zip(v.data()) {
            *x += dt * dv;
        }
    }
    Ok(a)
}

/// The student policy: backbone under the student mask over current-frame
/// tokens only, optionally corrected by the adapter.
pub struct CurrentOnlyPolicy<'a> {
    model: &'a PfdModel,
    current: Tensor,
    tau_video: Vec<f64>,
    batch: usize,
    use_adapter: bool,
}

impl<'a> CurrentOnlyPolicy<'a> {
    /// `current_frames` is `[batch, frame_dim]`, one clean current frame per sample.
    pub fn new(model: &'a PfdModel, current_frames: &Tensor, use_adapter: bool) -> Result<Self> {
        let dims = model.backbone.dims();
        if current_frames.shape().len() != 2 || current_frames.cols() != dims.frame_dim || current_frames.rows() == 0 {
            return Err(shape_err("policy", format!("current frames {:?}", current_frames.shape())));
        }
        let batch = current_frames.rows();
        let v = model.backbone.config().video_tokens_per_frame;
        let current = current_frames.clone().reshape(vec![batch * v, model.backbone.token_dim()])?;
        Ok(Self {
            model,
            current,
            tau_video: vec![1.0; batch],
            batch,
            use_adapter,
        })
    }

    pub fn chunk_shape(&self) -> [usize; 2] {
        let d = self.model.backbone.dims();
        [self.batch * d.action_tokens, d.action_dim]
    }
}

impl VelocityField for CurrentOnlyPolicy<'_> {
    fn velocity(&self, actions: &Tensor, tau: f64) -> Result<Tensor> {
        let taus = vec![tau; self.batch];
        let input = MotInput {
            video: &self.current,
            actions,
            current_clean: &self.current,
            tau_video: &self.tau_video,
            tau_action: &taus,
        };
        let (_, v_base) = self.model.backbone.forward_values(input, self.model.inference_mask())?;
        if self.use_adapter {
            v_base.add(&self.model.adapter.delta(&v_base, &taus)?)
        } else {
            Ok(v_base)
        }
    }
}

/// Samples one action chunk per current frame. Nothing beyond the current
/// frame can be passed in.
pub fn denoise_chunk(model: &PfdModel, current_frames: &Tensor, cfg: &SamplerConfig, use_adapter: bool, rng: &mut impl Rng) -> Result<Tensor> {
    cfg.validate()?;
    let policy = CurrentOnlyPolicy::new(model, current_frames, use_adapter)?;
    let noise = gaussian_like(&policy.chunk_shape(), rng);
    let chunk = euler_integrate(&policy, noise, cfg.num_steps)?;
    Ok(scaled(&chunk, 1.0 / model.action_scale()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub warmup: usize,
    pub trials: usize,
    pub num_steps: usize,
    pub baseline_ms: Vec<f64>,
    pub corrected_ms: Vec<f64>,
    pub mean_baseline_ms: f64,
    pub mean_corrected_ms: f64,
    /// `(mean_corrected - mean_baseline) / mean_baseline`
    pub overhead: f64,
}

impl LatencyReport {
    pub fn from_times(warmup: usize, num_steps: usize, baseline_ms: Vec<f64>, corrected_ms: Vec<f64>) -> Self {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (mb, mc) = (mean(&baseline_ms), mean(&corrected_ms));
        Self {
            warmup,
            trials: baseline_ms.len(),
            num_steps,
            mean_baseline_ms: mb,
            mean_corrected_ms: mc,
            overhead: (mc - mb) / mb,
            baseline_ms,
            corrected_ms,
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("warmup = {}\ntrials = {}\nnum_steps = {}\n", self.warmup, self.trials, self.num_steps));
        for (i, (b, c)) in self.baseline_ms.iter().zip(&self.corrected_ms).enumerate() {
            s.push_str(&format!("trial.{i} = baseline {b:.4} ms, corrected {c:.4} ms\n"));
        }
        s.push_str(&format!("mean_baseline_ms = {:.4}\n", self.mean_baseline_ms));
        s.push_str(&format!("mean_corrected_ms = {:.4}\n", self.mean_corrected_ms));
        s.push_str(&format!("overhead = {:.4}\n", self.overhead));
        s
    }
}

/// Times chunk inference with the adapter bypassed and applied. Each trial
/// runs both arms back to back, alternating which goes first, after `warmup`
/// untimed rounds. `bypass_corrected` disables the adapter in both arms.
pub fn measure_latency(
    model: &PfdModel,
    current_frame: &Tensor,
    num_steps: usize,
    warmup: usize,
    trials: usize,
    bypass_corrected: bool,
) -> Result<LatencyReport> {
    if trials == 0 {
        return Err(Error::InvalidConfig("latency needs at least one trial".into()));
    }
    let cfg = SamplerConfig { num_steps, ..SamplerConfig::default() };
    cfg.validate()?;
    let run = |adapter: bool| -> Result<f64> {
        // same seed in both arms so the work is identical apart from the adapter
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let start = Instant::now();
        let out = denoise_chunk(model, current_frame, &cfg, adapter, &mut rng)?;
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(out);
        Ok(elapsed)
    };
    let corrected = !bypass_corrected;
    for _ in 0..warmup {
        run(false)?;
        run(corrected)?;
    }
    let mut base = Vec::with_capacity(trials);
    let mut corr = Vec::with_capacity(trials);
    for i in 0..trials {
        if i % 2 == 0 {
            base.push(run(false)?);
            corr.push(run(corrected)?);
        } else {
            corr.push(run(corrected)?);
            base.push(run(false)?);
        }
    }
    Ok(LatencyReport::from_times(warmup, num_steps, base, corr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, ModelDims};
    use crate::pfd::AdapterConfig;

    /// Velocity `target - eps` for the known starting noise `eps`.
    struct ConstantField {
        velocity: Tensor,
    }

    impl VelocityField for ConstantField {
        fn velocity(&self, _: &Tensor, _: f64) -> Result<Tensor> {
            Ok(self.velocity.clone())
        }
    }

    /// Records every tau it is queried at.
    struct Probe(std::cell::RefCell<Vec<f64>>);

    impl VelocityField for Probe {
        fn velocity(&self, a: &Tensor, tau: f64) -> Result<Tensor> {
            self.0.borrow_mut().push(tau);
            Ok(Tensor::filled(a.shape().to_vec(), 1.0))
        }
    }

    fn model(seed: u64) -> PfdModel {
        let cfg = BackboneConfig { depth: 2, d_model: 16, heads: 2, ff_hidden: 16, video_tokens_per_frame: 2 };
        let dims = ModelDims { frames: 3, frame_dim: 8, action_tokens: 4, action_dim: 2 };
        PfdModel::new(cfg, dims, AdapterConfig { width: 8, tau_dim: 4 }, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn constant_field_recovers_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let target = gaussian_like(&[8, 2], &mut rng);
        for steps in [1, 2, 3, 7, 10] {
            let eps = gaussian_like(&[8, 2], &mut ChaCha8Rng::seed_from_u64(2));
            let field = ConstantField { velocity: target.sub(&eps).unwrap() };
            let out = euler_integrate(&field, eps, steps).unwrap();
            assert!(out.sub(&target).unwrap().max_abs() <= 1e-12, "{steps} steps");
        }
    }

    #[test]
    fn uniform_grid() {
        let p = Probe(Default::default());
        euler_integrate(&p, Tensor::zeros(vec![1, 1]), 4).unwrap();
        assert_eq!(*p.0.borrow(), vec![0.0, 0.25, 0.5, 0.75]);
    }

    #[test]
    fn single_step_is_one_euler_update() {
        let m = model(3);
        let frame = gaussian_like(&[1, 8], &mut ChaCha8Rng::seed_from_u64(4));
        let cfg = SamplerConfig { num_steps: 1, ..SamplerConfig::default() };
        let out = denoise_chunk(&m, &frame, &cfg, true, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let eps = gaussian_like(&[4, 2], &mut ChaCha8Rng::seed_from_u64(5));
        let policy = CurrentOnlyPolicy::new(&m, &frame, true).unwrap();
        let want = eps.add(&policy.velocity(&eps, 0.0).unwrap()).unwrap();
        assert!(out.bitwise_eq(&want));
    }

    #[test]
    fn reproducible_and_fresh_adapter_is_transparent() {
        let m = model(6);
        let frames = gaussian_like(&[3, 8], &mut ChaCha8Rng::seed_from_u64(7));
        let cfg = SamplerConfig::default();
        let a = denoise_chunk(&m, &frames, &cfg, true, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = denoise_chunk(&m, &frames, &cfg, true, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let c = denoise_chunk(&m, &frames, &cfg, false, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert!(a.bitwise_eq(&b));
        assert!(a.bitwise_eq(&c));
        assert_eq!(a.shape(), &[12, 2]);
    }

    #[test]
    fn batched_equals_per_sample() {
        let m = model(9);
        let frames = gaussian_like(&[2, 8], &mut ChaCha8Rng::seed_from_u64(10));
        let noise = gaussian_like(&[8, 2], &mut ChaCha8Rng::seed_from_u64(11));
        let joint = euler_integrate(&CurrentOnlyPolicy::new(&m, &frames, false).unwrap(), noise.clone(), 3).unwrap();
        for b in 0..2 {
            let f = Tensor::matrix(1, 8, frames.row(b).to_vec()).unwrap();
            let n = Tensor::matrix(4, 2, noise.data()[b * 8..(b + 1) * 8].to_vec()).unwrap();
            let single = euler_integrate(&CurrentOnlyPolicy::new(&m, &f, false).unwrap(), n, 3).unwrap();
            let diff: f64 = single.data().iter().zip(&joint.data()[b * 8..(b + 1) * 8]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "{diff}");
        }
    }

    #[test]
    fn rejects_guidance_and_zero_steps() {
        assert!(SamplerConfig { guidance_scale: 1.5, ..SamplerConfig::default() }.validate().is_err());
        assert!(SamplerConfig { num_steps: 0, ..SamplerConfig::default() }.validate().is_err());
        let m = model(1);
        let f = Tensor::zeros(vec![1, 8]);
        assert!(measure_latency(&m, &f, 2, 0, 0, false).is_err());
        assert!(CurrentOnlyPolicy::new(&m, &Tensor::zeros(vec![1, 5]), false).is_err());
    }

    #[test]
    fn latency_report_arithmetic() {
        let r = LatencyReport::from_times(5, 10, vec![10.0, 10.0], vec![11.0, 11.0]);
        assert!((r.overhead - 0.1).abs() < 1e-12);
        assert_eq!(r.trials, 2);
        assert!(r.render().contains("overhead = 0.1000"));
        let m = model(2);
        let rep = measure_latency(&m, &Tensor::zeros(vec![1, 8]), 2, 1, 3, false).unwrap();
        assert_eq!(rep.baseline_ms.len(), 3);
        assert!(rep.mean_baseline_ms > 0.0);
    }
}
