//! Minimal reverse-mode differentiable tensor engine.
//!
//! Supplies exactly the primitives the reconstruction networks need: 2D/3D
//! cross-correlation with analytic gradients, single-axis sub-pixel
//! upsampling (pixel shuffle along one spatial axis), ReLU, channel
//! concatenation, elementwise add/scale, mean-L1 loss, Adam, and seeded
//! parameter initialization.
//!
//! Differentiation is reverse-mode over a per-forward tape ([`Tape`]): every
//! operation eagerly computes its value and records its inputs; [`Tape::backward`]
//! walks the tape once in reverse. There are no higher-order derivatives.
//!
//! The element type is generic over [`Element`]: `f32` is the training type,
//! `f64` exists for finite-difference verification ([`grad_check`]).

mod check;
mod conv;
mod optim;
mod tape;
mod tensor;

pub use check::grad_check;
pub use optim::{init_params, ParamInit, ParamSpec, ParamStore, Param};
pub use tape::{PadMode, Tape, Value};
pub use tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NdiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("kernel extents must be odd, got {0:?}")]
    NonOddKernel(Vec<usize>),
    #[error("channel count {channels} is not divisible by upsampling factor {k}")]
    NonDivisibleChannels { channels: usize, k: usize },
    #[error("gradient keys do not match parameters: {0}")]
    KeyMismatch(String),
}
