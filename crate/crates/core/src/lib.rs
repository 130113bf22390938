//! Privileged foresight distillation for flow-matching action policies.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod harness;
pub mod pfd;
pub mod sampler;
pub mod world;

pub use error::{Error, Result};
