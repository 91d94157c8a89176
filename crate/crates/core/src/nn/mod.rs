//! Minimal deterministic neural-network stack.
//!
//! Layers carry their own gradient buffers; `backward` accumulates into them
//! so shared-weight double passes just work. Everything is single-threaded
//! with fixed reduction order, which keeps training bitwise reproducible.

pub mod layers;
pub mod optim;
pub mod param;

pub use layers::{
    silu, silu_backward, timestep_embedding, upsample2_backward, upsample2_nearest, Conv2d,
    Linear,
};
pub use optim::AdamW;
pub use param::{ParamSet, ParamView};
