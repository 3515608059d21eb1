//! Spatial-temporal disentangled 4D latent diffusion at desk scale.
//!
//! * [`diffusion`]: schedule, forward/reverse steps, autoencoder, `L_ldm`.
//! * [`model`]: disentangler, spatial/temporal channels, conditional fusion.
//! * [`orster`]: joint Gaussian kernel, kernel attention and distillation.
//! * [`consistency`] and [`conditioning`]: stage-3 and stage-4 objectives.
//! * [`gs4d`]: Gaussians, splat renderer, HexPlane deformation, construction.
//! * [`harness`]: synthetic scenes, metrics, configuration, pipeline.

pub mod checkpoint;
pub mod conditioning;
pub mod consistency;
pub mod diffusion;
mod error;
pub mod gs4d;
pub mod harness;
pub mod model;
pub mod nn;
pub mod orster;

pub(crate) use error::invalid;
pub use error::{Error, Result};
