use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adapter::{Adapter, AdapterConfig};
use crate::autodiff::Tensor;
use crate::backbone::{build_student_mask, build_teacher_mask, BackboneConfig, JointMask, ModelDims, MotModel};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::world::TrajectoryBatch;

/// Backbone theta plus adapter phi, with the masks for the training layout.
#[derive(Clone, Debug)]
pub struct PfdModel {
    pub backbone: MotModel,
    pub adapter: Adapter,
    student_mask: JointMask,
    teacher_mask: JointMask,
    inference_mask: JointMask,
    action_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    backbone: BackboneConfig,
    dims: ModelDims,
    adapter: AdapterConfig,
    #[serde(default = "unit_scale")]
    action_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

/// Model-ready views of a trajectory batch.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub batch: usize,
    /// Clean video tokens of every frame.
    pub video: Tensor,
    pub actions: Tensor,
    /// Clean frame-1 tokens.
    pub current: Tensor,
}

impl PfdModel {
    pub fn new(backbone: BackboneConfig, dims: ModelDims, adapter: AdapterConfig, rng: &mut impl Rng) -> Result<Self> {
        let backbone = MotModel::new(backbone, dims, rng)?;
        let adapter = Adapter::new(adapter, dims.action_dim, rng)?;
        Ok(Self::assemble(backbone, adapter))
    }

    fn assemble(backbone: MotModel, adapter: Adapter) -> Self {
        let layout = *backbone.layout();
        Self {
            student_mask: build_student_mask(layout),
            teacher_mask: build_teacher_mask(layout),
            inference_mask: build_student_mask(layout.current_only()),
            backbone,
            adapter,
            action_scale: 1.0,
        }
    }

    /// Actions are multiplied by this before flow matching and divided by it
    /// after sampling, so the model works at roughly unit scale.
    pub fn action_scale(&self) -> f64 {
        self.action_scale
    }

    pub fn set_action_scale(&mut self, scale: f64) -> Result<()> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidConfig(format!("action scale {scale} must be positive")));
        }
        self.action_scale = scale;
        Ok(())
    }

    pub fn student_mask(&self) -> &JointMask {
        &self.student_mask
    }

    pub fn teacher_mask(&self) -> &JointMask {
        &self.teacher_mask
    }

    /// Student mask over a sequence holding only the current frame.
    pub fn inference_mask(&self) -> &JointMask {
        &self.inference_mask
    }

    /// Replaces phi with a freshly initialized adapter of `cfg`.
    pub fn reset_adapter(&mut self, cfg: AdapterConfig, rng: &mut impl Rng) -> Result<()> {
        self.adapter = Adapter::new(cfg, self.backbone.dims().action_dim, rng)?;
        Ok(())
    }

    pub fn prepare(&self, batch: &TrajectoryBatch) -> Result<PreparedBatch> {
        let v = self.backbone.config().video_tokens_per_frame;
        let td = self.backbone.token_dim();
        let dims = self.backbone.dims();
        if batch.frames_per_sample != dims.frames || batch.frames.cols() != dims.frame_dim || batch.actions.cols() != dims.action_dim {
            return Err(Error::ShapeMismatch {
                op: "prepare",
                detail: format!("batch frames {:?} / actions {:?} vs model {dims:?}", batch.frames.shape(), batch.actions.shape()),
            });
        }
        Ok(PreparedBatch {
            batch: batch.len(),
            video: batch.video_tokens(v)?,
            actions: scaled(&batch.actions, self.action_scale),
            current: batch.current_frames().reshape(vec![batch.len() * v, td])?,
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = ModelMeta {
            backbone: self.backbone.config().clone(),
            dims: *self.backbone.dims(),
            adapter: *self.adapter.config(),
            action_scale: self.action_scale,
        };
        let meta = serde_json::to_string(&meta).map_err(|e| Error::Format {
            what: "checkpoint",
            detail: e.to_string(),
        })?;
        let mut ck = Checkpoint::new(meta);
        ck.push_store("backbone.", self.backbone.params());
        ck.push_store("adapter.", self.adapter.params());
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_str(&ck.meta).map_err(|e| Error::Format {
            what: "checkpoint",
            detail: e.to_string(),
        })?;
        // parameter values are overwritten below, so the init stream is irrelevant
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let mut backbone = MotModel::new(meta.backbone, meta.dims, &mut rng)?;
        let mut adapter = Adapter::new(meta.adapter, meta.dims.action_dim, &mut rng)?;
        ck.fill_store("backbone.", backbone.params_mut())?;
        ck.fill_store("adapter.", adapter.params_mut())?;
        let mut model = Self::assemble(backbone, adapter);
        model.set_action_scale(meta.action_scale)?;
        Ok(model)
    }
}

pub(crate) fn scaled(t: &Tensor, s: f64) -> Tensor {
    let mut out = t.clone();
    if s != 1.0 {
        out.data_mut().iter_mut().for_each(|x| *x *= s);
    }
    out
}
