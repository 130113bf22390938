//! Student and teacher forwards, foresight residual, losses and one training step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adapter::adapter_apply;
use super::model::{PfdModel, PreparedBatch};
use super::optim::{AdamW, GradGroup};
use crate::autodiff::{Bound, Gradients, ParamId, ParamStore, Tape, Tensor, Var};
use crate::backbone::{select_trainable, MotInput, MotModel, TrainableSet};
use crate::error::{shape_err, Error, Result};
use crate::flow::{draw_sample, interpolate, schedule_weights, FlowSample, WeightSchedule};
use crate::world::{shuffle_future, TrajectoryBatch};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub video: f64,
    pub gt: f64,
    pub res: f64,
    pub teacher: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            video: 1.0,
            gt: 1.0,
            res: 0.5,
            teacher: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.video, self.gt, self.res, self.teacher].iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("loss weights must be non-negative: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub video: f64,
    pub gt: f64,
    pub res: f64,
    pub teacher: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted(video: f64, gt: f64, res: f64, teacher: f64, w: &LossWeights) -> Self {
        Self {
            video,
            gt,
            res,
            teacher,
            total: w.video * video + w.gt * gt + w.res * res + w.teacher * teacher,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.video, self.gt, self.res, self.teacher, self.total].iter().all(|x| x.is_finite())
    }
}

/// Which backbone parameters may move.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Regime {
    /// Every backbone parameter, heads and embedders included.
    Full,
    /// The last `k_action` / `k_video` blocks of each expert.
    Partial { k_action: usize, k_video: usize },
    /// Backbone frozen; only the adapter trains.
    AdapterOnly,
}

impl Regime {
    pub fn trainable(&self, model: &MotModel) -> Result<TrainableSet> {
        match *self {
            Regime::Full => Ok(model.everything()),
            Regime::Partial { k_action, k_video } => select_trainable(model, k_action, k_video),
            Regime::AdapterOnly => Ok(TrainableSet::empty()),
        }
    }
}

/// Training objective for one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Flow matching on the student path only; no teacher, no adapter.
    Student,
    /// The four-term objective with a detached teacher on the true future.
    Pfd,
    /// As `Pfd`, with every sample's future frames taken from another sample.
    ShuffledPfd,
    /// Pretraining: student and teacher-mask action losses, both with gradient.
    /// The teacher-mask flow-matching loss is reported in the `teacher` slot
    /// and weighted by `gt`.
    Joint,
}

impl Objective {
    pub fn uses_adapter(self) -> bool {
        matches!(self, Objective::Pfd | Objective::ShuffledPfd)
    }

    pub fn runs_teacher(self) -> bool {
        !matches!(self, Objective::Student)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherUse {
    None,
    TrueFuture,
    ShuffledFuture,
}

#[derive(Clone, Debug)]
pub struct StepSpec {
    pub objective: Objective,
    pub trainable: TrainableSet,
    pub weights: LossWeights,
    pub schedule: WeightSchedule,
}

/// Where the step's teacher values come from. `Constants` substitutes equal
/// values as fresh non-differentiable leaves, for detachment checks.
#[derive(Clone, Debug)]
pub enum TeacherSource {
    Forward,
    Constants { v_teacher: Tensor, r: Tensor },
}

/// Action-side values of one step.
#[derive(Clone, Debug)]
pub struct PfdOutputs {
    pub v_base: Tensor,
    pub v_teacher: Option<Tensor>,
    pub r: Option<Tensor>,
    pub delta: Option<Tensor>,
    pub v_final: Tensor,
}

/// Gradients of trainable parameters that the loss reached.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepGradients {
    pub backbone: Vec<(ParamId, Tensor)>,
    pub adapter: Vec<(ParamId, Tensor)>,
}

impl StepGradients {
    pub fn bitwise_eq(&self, other: &StepGradients) -> bool {
        let same = |a: &[(ParamId, Tensor)], b: &[(ParamId, Tensor)]| {
            a.len() == b.len() && a.iter().zip(b).all(|((ia, ta), (ib, tb))| ia == ib && ta.bitwise_eq(tb))
        };
        same(&self.backbone, &other.backbone) && same(&self.adapter, &other.adapter)
    }
}

/// `r = sg(v_teacher - v_base)`.
pub fn foresight_residual(tape: &mut Tape, v_teacher: Var, v_base: Var) -> Result<Var> {
    let vt = tape.value(v_teacher).shape().to_vec();
    let vb = tape.value(v_base).shape().to_vec();
    if vt != vb {
        return Err(shape_err("foresight_residual", format!("{vt:?} vs {vb:?}")));
    }
    let diff = tape.sub(v_teacher, v_base)?;
    tape.stop_gradient(diff)
}

/// Per-row weights for `rows` rows split evenly over samples; `None` when all are 1.
fn row_weights(per_sample: &[f64], rows: usize) -> Option<Vec<f64>> {
    if per_sample.iter().all(|&w| w == 1.0) {
        return None;
    }
    let each = rows / per_sample.len();
    Some(per_sample.iter().flat_map(|&w| std::iter::repeat_n(w, each)).collect())
}

/// Loss graph nodes of Eqs. 6-10.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub video: Var,
    pub gt: Var,
    pub res: Var,
    pub teacher: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            video: tape.value(self.video).item(),
            gt: tape.value(self.gt).item(),
            res: tape.value(self.res).item(),
            teacher: tape.value(self.teacher).item(),
            total: tape.value(self.total).item(),
        }
    }
}

/// Squared norms are means over elements. `w_v` and `w_a` hold one weight per
/// sample, applied to that sample's video and action rows.
#[allow(clippy::too_many_arguments)]
pub fn compute_losses(
    tape: &mut Tape,
    u_video: Var,
    u_target: Var,
    v_final: Var,
    v_target: Var,
    delta: Var,
    r: Var,
    v_teacher: Var,
    weights: &LossWeights,
    w_v: &[f64],
    w_a: &[f64],
) -> Result<LossVars> {
    let vrows = tape.value(u_video).rows();
    let arows = tape.value(v_final).rows();
    let video = tape.weighted_mse(u_video, u_target, row_weights(w_v, vrows))?;
    let gt = tape.weighted_mse(v_final, v_target, row_weights(w_a, arows))?;
    let res = tape.mse(delta, r)?;
    let teacher = tape.mse(v_final, v_teacher)?;
    let total = weighted_sum(tape, &[(video, weights.video), (gt, weights.gt), (res, weights.res), (teacher, weights.teacher)])?;
    Ok(LossVars {
        video,
        gt,
        res,
        teacher,
        total,
    })
}

fn weighted_sum(tape: &mut Tape, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc = tape.scale(terms[0].0, terms[0].1)?;
    for &(v, w) in &terms[1..] {
        let s = tape.scale(v, w)?;
        acc = tape.add(acc, s)?;
    }
    Ok(acc)
}

/// Backbone and adapter parameters bound on one tape.
pub struct BoundModel {
    pub backbone: Bound,
    pub adapter: Bound,
    backbone_flags: Vec<bool>,
    adapter_trainable: bool,
}

impl BoundModel {
    pub fn bind(tape: &mut Tape, model: &PfdModel, trainable: &TrainableSet, adapter_trainable: bool) -> Self {
        let backbone_flags = model.backbone.trainable_flags(trainable);
        let backbone = model.backbone.params().bind(tape, |id| backbone_flags[id.index()]);
        let adapter = model.adapter.params().bind(tape, |_| adapter_trainable);
        Self {
            backbone,
            adapter,
            backbone_flags,
            adapter_trainable,
        }
    }

    pub fn gradients(&self, grads: &Gradients, model: &PfdModel) -> StepGradients {
        let collect = |store: &ParamStore, bound: &Bound, on: &dyn Fn(ParamId) -> bool| {
            store
                .ids()
                .filter(|id| on(*id))
                .filter_map(|id| grads.get(bound.var(id)).map(|g| (id, g.clone())))
                .collect()
        };
        StepGradients {
            backbone: collect(model.backbone.params(), &self.backbone, &|id| self.backbone_flags[id.index()]),
            adapter: collect(model.adapter.params(), &self.adapter, &|_| self.adapter_trainable),
        }
    }
}

/// Everything one step's graph produced.
pub struct StepGraph {
    pub tape: Tape,
    pub bound: BoundModel,
    pub losses: LossVars,
    pub v_base: Var,
    pub v_teacher: Option<Var>,
    pub r: Option<Var>,
    pub delta: Option<Var>,
    pub v_final: Var,
}

impl StepGraph {
    pub fn outputs(&self) -> PfdOutputs {
        let val = |v: Var| self.tape.value(v).clone();
        PfdOutputs {
            v_base: val(self.v_base),
            v_teacher: self.v_teacher.map(val),
            r: self.r.map(val),
            delta: self.delta.map(val),
            v_final: val(self.v_final),
        }
    }
}

fn mot_input<'a>(video: &'a Tensor, prepared: &'a PreparedBatch, sample: &'a FlowSample) -> MotInput<'a> {
    MotInput {
        video,
        actions: &sample.actions,
        current_clean: &prepared.current,
        tau_video: &sample.tau_video,
        tau_action: &sample.tau_action,
    }
}

/// Builds the step graph. `teacher_video` replaces the corrupted video seen by
/// the teacher forward (shuffled futures); the student always sees `sample.video`.
pub fn build_step(
    model: &PfdModel,
    prepared: &PreparedBatch,
    sample: &FlowSample,
    teacher_video: Option<&Tensor>,
    spec: &StepSpec,
    source: &TeacherSource,
) -> Result<StepGraph> {
    spec.weights.validate()?;
    spec.schedule.validate()?;
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, model, &spec.trainable, spec.objective.uses_adapter());
    let bb = &model.backbone;
    let student = bb.forward(&mut tape, &bound.backbone, mot_input(&sample.video, prepared, sample), model.student_mask())?;
    let v_base = student.v_act;

    let (w_v, w_a): (Vec<f64>, Vec<f64>) = sample
        .tau_video
        .iter()
        .zip(&sample.tau_action)
        .map(|(&tv, &ta)| schedule_weights(&spec.schedule, tv, ta))
        .unzip();
    let u_target = tape.constant(sample.u_target.clone());
    let v_target = tape.constant(sample.v_target.clone());

    let teacher_forward = |tape: &mut Tape| -> Result<Var> {
        let video = teacher_video.unwrap_or(&sample.video);
        let out = bb.forward(tape, &bound.backbone, mot_input(video, prepared, sample), model.teacher_mask())?;
        Ok(out.v_act)
    };

    match spec.objective {
        Objective::Student => {
            let zero = tape.constant(Tensor::scalar(0.0));
            let vrows = tape.value(student.u_video).rows();
            let video = tape.weighted_mse(student.u_video, u_target, row_weights(&w_v, vrows))?;
            let gt = tape.weighted_mse(v_base, v_target, row_weights(&w_a, tape.value(v_base).rows()))?;
            let total = weighted_sum(&mut tape, &[(video, spec.weights.video), (gt, spec.weights.gt)])?;
            let losses = LossVars { video, gt, res: zero, teacher: zero, total };
            Ok(StepGraph { tape, bound, losses, v_base, v_teacher: None, r: None, delta: None, v_final: v_base })
        }
        Objective::Joint => {
            let vt = teacher_forward(&mut tape)?;
            let zero = tape.constant(Tensor::scalar(0.0));
            let vrows = tape.value(student.u_video).rows();
            let arows = tape.value(v_base).rows();
            let video = tape.weighted_mse(student.u_video, u_target, row_weights(&w_v, vrows))?;
            let gt = tape.weighted_mse(v_base, v_target, row_weights(&w_a, arows))?;
            let teacher = tape.weighted_mse(vt, v_target, row_weights(&w_a, arows))?;
            let w = &spec.weights;
            let total = weighted_sum(&mut tape, &[(video, w.video), (gt, w.gt), (teacher, w.gt)])?;
            let losses = LossVars { video, gt, res: zero, teacher, total };
            Ok(StepGraph { tape, bound, losses, v_base, v_teacher: Some(vt), r: None, delta: None, v_final: v_base })
        }
        Objective::Pfd | Objective::ShuffledPfd => {
            let (vt, r) = match source {
                TeacherSource::Forward => {
                    let live = teacher_forward(&mut tape)?;
                    let vt = tape.stop_gradient(live)?;
                    let r = foresight_residual(&mut tape, vt, v_base)?;
                    (vt, r)
                }
                TeacherSource::Constants { v_teacher, r } => (tape.constant(v_teacher.clone()), tape.constant(r.clone())),
            };
            let (delta, v_final) = adapter_apply(&mut tape, &model.adapter, &bound.adapter, v_base, &sample.tau_action)?;
            let losses = compute_losses(
                &mut tape,
                student.u_video,
                u_target,
                v_final,
                v_target,
                delta,
                r,
                vt,
                &spec.weights,
                &w_v,
                &w_a,
            )?;
            Ok(StepGraph { tape, bound, losses, v_base, v_teacher: Some(vt), r: Some(r), delta: Some(delta), v_final })
        }
    }
}

/// Loss values, action outputs and gradients for one step.
pub fn step_gradients(
    model: &PfdModel,
    prepared: &PreparedBatch,
    sample: &FlowSample,
    teacher_video: Option<&Tensor>,
    spec: &StepSpec,
    source: &TeacherSource,
) -> Result<(LossBreakdown, PfdOutputs, StepGradients)> {
    let g = build_step(model, prepared, sample, teacher_video, spec, source)?;
    let grads = g.tape.backward(g.losses.total)?;
    Ok((g.losses.values(&g.tape), g.outputs(), g.bound.gradients(&grads, model)))
}

/// Corrupted video for the teacher when futures are shuffled: the permuted
/// clean frames go through the same noise and timesteps as the student's.
pub fn shuffled_teacher_video(
    model: &PfdModel,
    batch: &TrajectoryBatch,
    sample: &FlowSample,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let shuffled = shuffle_future(batch, rng)?;
    let tokens = shuffled.video_tokens(model.backbone.config().video_tokens_per_frame)?;
    Ok(interpolate(&tokens, &sample.eps_video, &sample.tau_video)?.0)
}

/// One record of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub losses: LossBreakdown,
    pub max_r: f64,
    pub max_delta: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub teacher: TeacherUse,
}

/// Random streams for a training run. Shuffling draws from its own stream so
/// that runs differing only in the teacher's data see identical batches and noise.
pub struct StepRngs<'a, R: Rng> {
    pub data: &'a mut R,
    pub shuffle: &'a mut R,
}

/// Samples noise and timesteps, builds the graph, backpropagates and updates
/// exactly the trainable parameters.
pub fn train_step<R: Rng>(
    model: &mut PfdModel,
    opt: &mut AdamW,
    batch: &TrajectoryBatch,
    spec: &StepSpec,
    rngs: StepRngs<'_, R>,
) -> Result<StepReport> {
    let prepared = model.prepare(batch)?;
    let sample = draw_sample(&prepared.video, &prepared.actions, prepared.batch, rngs.data)?;
    let (teacher_video, teacher) = match spec.objective {
        Objective::ShuffledPfd => (Some(shuffled_teacher_video(model, batch, &sample, rngs.shuffle)?), TeacherUse::ShuffledFuture),
        Objective::Student => (None, TeacherUse::None),
        Objective::Pfd | Objective::Joint => (None, TeacherUse::TrueFuture),
    };
    let step = opt.steps_taken();
    let (losses, out, grads) = step_gradients(model, &prepared, &sample, teacher_video.as_ref(), spec, &TeacherSource::Forward)?;
    let max_r = out.r.as_ref().map_or(0.0, Tensor::max_abs);
    let max_delta = out.delta.as_ref().map_or(0.0, Tensor::max_abs);
    if !losses.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            diagnostics: format!("{losses:?}, max|r| {max_r}, max|delta| {max_delta}"),
        });
    }
    let stats = apply_gradients(model, opt, spec, grads);
    Ok(StepReport {
        step,
        losses,
        max_r,
        max_delta,
        grad_norm: stats.grad_norm,
        lr: stats.lr,
        teacher,
    })
}

/// Fills zero gradients for trainable parameters the loss did not reach, so
/// every trainable tensor gets a moment update, then steps the optimizer.
fn apply_gradients(model: &mut PfdModel, opt: &mut AdamW, spec: &StepSpec, grads: StepGradients) -> super::optim::OptStats {
    let flags = model.backbone.trainable_flags(&spec.trainable);
    let complete = |store: &ParamStore, on: &dyn Fn(ParamId) -> bool, got: Vec<(ParamId, Tensor)>| {
        let mut got = got.into_iter().peekable();
        let mut out = Vec::new();
        for id in store.ids().filter(|id| on(*id)) {
            match got.peek() {
                Some((gid, _)) if *gid == id => out.push(got.next().expect("peeked")),
                _ => out.push((id, Tensor::zeros(store.get(id).shape().to_vec()))),
            }
        }
        out
    };
    let bb = complete(model.backbone.params(), &|id| flags[id.index()], grads.backbone);
    let uses_adapter = spec.objective.uses_adapter();
    let ad = complete(model.adapter.params(), &|_| uses_adapter, grads.adapter);
    let PfdModel { backbone, adapter, .. } = model;
    opt.step(&mut [
        GradGroup { store: backbone.params_mut(), grads: bb },
        GradGroup { store: adapter.params_mut(), grads: ad },
    ])
}

/// Action flow-matching losses on a fixed sample, nothing updated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowEval {
    /// Student mask, no adapter.
    pub base: f64,
    /// Student mask with the adapter when `with_adapter`, else equal to `base`.
    pub corrected: f64,
    pub teacher: f64,
}

pub fn eval_flow_losses(model: &PfdModel, prepared: &PreparedBatch, sample: &FlowSample, with_adapter: bool) -> Result<FlowEval> {
    let bb = &model.backbone;
    let input = mot_input(&sample.video, prepared, sample);
    let (_, v_base) = bb.forward_values(input, model.student_mask())?;
    let (_, v_teacher) = bb.forward_values(input, model.teacher_mask())?;
    let mse = |a: &Tensor| -> Result<f64> {
        let d = a.sub(&sample.v_target)?;
        Ok(d.data().iter().map(|x| x * x).sum::<f64>() / d.numel() as f64)
    };
    let base = mse(&v_base)?;
    let corrected = if with_adapter {
        mse(&v_base.add(&model.adapter.delta(&v_base, &sample.tau_action)?)?)?
    } else {
        base
    };
    Ok(FlowEval {
        base,
        corrected,
        teacher: mse(&v_teacher)?,
    })
}
