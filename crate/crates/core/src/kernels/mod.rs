//! Differentiable numeric kernels: tensors, a reverse-mode tape, transformer
//! layers, AdamW and a finite-difference gradient checker.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod mask;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_gradients, check_gradients_at, GradCheckReport};
pub use layers::{
    cross_attention, cross_entropy, masked_attention, mlp_width, transformer_block, BlockParams,
    CrossAttnParams,
};
pub use mask::{AttentionMask, MaskKind};
pub use optim::{AdamWConfig, OptimizerState, StepReport};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
