//! Dense tensors, kernels, and reverse-mode differentiation.

pub mod fd;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod resample;
mod tape;
mod tensor;

pub use fd::{fd_gradient, fd_gradient_oracle, relative_error};
pub use ops::{gelu, group_norm, linear_map, softmax, softmax_xent};
pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use resample::Resampler;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{ParamStore, Tensor};
