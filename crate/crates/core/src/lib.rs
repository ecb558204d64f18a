//! Head-avatar pipeline: a deformable triplane-Gaussian scene representation,
//! a differentiable multi-channel splatter, and a block-structured style
//! generator with volumetric feature injection, trained in three stages.

pub mod camera;
pub mod error;
pub mod gaussians;
pub mod generator;
pub mod math;
pub mod mesh;
pub mod metrics;
pub mod data;
pub mod deformer;
pub mod objectives;
pub mod splat;
pub mod synth;
pub mod triplane;

pub use error::{Error, Result};
