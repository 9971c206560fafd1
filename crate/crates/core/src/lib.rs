//! Component-disentangled clothed avatars built from layered UV Gaussian planes.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: f32 tensors, a reverse-mode tape, Adam and the checkpoint format.
//! * [`body`]: a parametric body with blendshapes, kinematic tree and skinning.
//! * [`template`]: component templates, the three-layer UV atlas, Gaussian seeds
//!   and the fused skinning-weight volume.
//! * [`plane`]: the 12×128×384 feature plane and its two shared decoders.
//! * [`render`]: tile-based differentiable Gaussian splatting plus a brute-force oracle.
//! * [`deform`]: shape/expression/pose offsets and skinning of Gaussians.
//! * [`losses`]: reconstruction, body constraints and regularisers.
//! * [`diffusion`]: noise schedule, v-prediction loss, ancestral sampling.
//! * [`pipeline`]: joint fitting, component transfer and animation.
//! * [`assets`]: scene manifests, image IO, PLY export and synthetic scenes.

pub mod assets;
pub mod body;
pub mod checks;
pub mod deform;
pub mod diffusion;
mod error;
pub mod losses;
pub mod math;
pub mod pipeline;
pub mod plane;
pub mod render;
pub mod template;
pub mod tensor;

pub use error::{Error, Result};
