//! Linear-path corruption and velocity targets.
//!
//! Batched tensors stack samples along rows; each sample owns a contiguous
//! block of rows and its own timestep.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{shape_err, Error, Result};

/// Independent uniform draws for the video and action timesteps.
pub fn sample_timesteps(rng: &mut impl Rng) -> (f64, f64) {
    let tau_v = rng.gen::<f64>();
    let tau_a = rng.gen::<f64>();
    (tau_v, tau_a)
}

pub fn gaussian_like(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

#[derive(Clone, Debug)]
pub struct FlowSample {
    pub tau_video: Vec<f64>,
    pub tau_action: Vec<f64>,
    pub eps_video: Tensor,
    pub eps_action: Tensor,
    pub video: Tensor,
    pub actions: Tensor,
    pub u_target: Tensor,
    pub v_target: Tensor,
}

fn check_tau(tau: f64) -> Result<()> {
    if (0.0..=1.0).contains(&tau) {
        Ok(())
    } else {
        Err(Error::TimestepOutOfRange(tau))
    }
}

/// `(1 - tau) * eps + tau * clean` per sample, plus the target `clean - eps`.
pub fn interpolate(clean: &Tensor, eps: &Tensor, taus: &[f64]) -> Result<(Tensor, Tensor)> {
    if clean.shape() != eps.shape() {
        return Err(shape_err("corrupt", format!("{:?} vs noise {:?}", clean.shape(), eps.shape())));
    }
    let rows = clean.rows();
    if taus.is_empty() || !rows.is_multiple_of(taus.len()) {
        return Err(shape_err("corrupt", format!("{rows} rows for {} timesteps", taus.len())));
    }
    let per = rows / taus.len() * clean.cols();
    let mut mixed = Vec::with_capacity(clean.numel());
    let mut target = Vec::with_capacity(clean.numel());
    for (i, (&x, &e)) in clean.data().iter().zip(eps.data()).enumerate() {
        let tau = taus[i / per];
        mixed.push((1.0 - tau) * e + tau * x);
        target.push(x - e);
    }
    let shape = clean.shape().to_vec();
    Ok((Tensor::new(shape.clone(), mixed)?, Tensor::new(shape, target)?))
}

/// Eq. 1 corruption of a batch of video tokens and action chunks.
pub fn corrupt(
    video: &Tensor,
    actions: &Tensor,
    tau_video: &[f64],
    tau_action: &[f64],
    eps_video: Tensor,
    eps_action: Tensor,
) -> Result<FlowSample> {
    if tau_video.len() != tau_action.len() {
        return Err(shape_err("corrupt", "timestep arrays differ in length"));
    }
    for &t in tau_video.iter().chain(tau_action) {
        check_tau(t)?;
    }
    let (xv, u_target) = interpolate(video, &eps_video, tau_video)?;
    let (xa, v_target) = interpolate(actions, &eps_action, tau_action)?;
    Ok(FlowSample {
        tau_video: tau_video.to_vec(),
        tau_action: tau_action.to_vec(),
        eps_video,
        eps_action,
        video: xv,
        actions: xa,
        u_target,
        v_target,
    })
}

/// Draws timesteps and one noise pair for the batch, then corrupts.
pub fn draw_sample(video: &Tensor, actions: &Tensor, batch: usize, rng: &mut impl Rng) -> Result<FlowSample> {
    let (tv, ta): (Vec<f64>, Vec<f64>) = (0..batch).map(|_| sample_timesteps(rng)).unzip();
    let ev = gaussian_like(video.shape(), rng);
    let ea = gaussian_like(actions.shape(), rng);
    corrupt(video, actions, &tv, &ta, ev, ea)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant(f64),
    /// Linear interpolation from `start` at tau = 0 to `end` at tau = 1.
    Linear { start: f64, end: f64 },
}

impl Schedule {
    pub fn at(&self, tau: f64) -> f64 {
        match *self {
            Schedule::Constant(c) => c,
            Schedule::Linear { start, end } => start + (end - start) * tau,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Schedule::Constant(c) => c > 0.0 && c.is_finite(),
            Schedule::Linear { start, end } => start > 0.0 && end > 0.0 && start.is_finite() && end.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("weight schedule {self:?} must be positive on [0, 1]")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightSchedule {
    pub video: Schedule,
    pub action: Schedule,
}

impl Default for WeightSchedule {
    fn default() -> Self {
        Self {
            video: Schedule::Constant(1.0),
            action: Schedule::Constant(1.0),
        }
    }
}

impl WeightSchedule {
    pub fn new(video: Schedule, action: Schedule) -> Result<Self> {
        let s = Self { video, action };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.video.validate()?;
        self.action.validate()
    }
}

pub fn schedule_weights(sched: &WeightSchedule, tau_v: f64, tau_a: f64) -> (f64, f64) {
    (sched.video.at(tau_v), sched.action.at(tau_a))
}
