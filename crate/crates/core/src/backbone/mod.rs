//! Mixture-of-Transformers backbone with student/teacher joint attention masks.

mod mask;
mod mot;

pub use mask::{build_student_mask, build_teacher_mask, JointMask, MaskKind, TokenLayout};
pub use mot::{
    select_trainable, BackboneConfig, BlockId, Expert, ModelDims, MotInput, MotModel, MotOutput, TrainableSet,
};
