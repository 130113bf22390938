//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod kernels;
mod params;
mod tape;
mod tensor;

pub use kernels::{masked_softmax, sinusoidal_embed, AttentionMask, SharedMask};
pub(crate) use kernels::sinusoid_values;
pub use params::{
    linear_uniform_init, linear_zero_init, Bound, LayerNorm, Linear, LinearBlock, ParamId, ParamStore,
};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

/// Values-only stop-gradient: registers a detached copy of `t` on `tape`.
pub fn stop_gradient(tape: &mut Tape, t: Var) -> crate::Result<Var> {
    tape.stop_gradient(t)
}
