//! Privileged foresight distillation: the detached teacher, the foresight
//! residual, the residual adapter and the training objective.

mod adapter;
mod model;
mod objective;
mod optim;

pub use adapter::{adapter_apply, Adapter, AdapterConfig};
pub use model::{PfdModel, PreparedBatch};
pub(crate) use model::scaled;
pub use objective::{
    build_step, compute_losses, eval_flow_losses, foresight_residual, FlowEval, shuffled_teacher_video, step_gradients, train_step,
    BoundModel, LossBreakdown, LossVars, LossWeights, Objective, PfdOutputs, Regime, StepGradients, StepGraph, StepReport,
    StepRngs, StepSpec, TeacherSource, TeacherUse,
};
pub use optim::{cosine_lr, AdamW, GradGroup, OptStats, OptimizerConfig};
