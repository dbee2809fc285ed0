//! Miniature latent diffusion with a character image feature encoder.

pub mod backbone;
pub mod character_encoder;
pub mod checkpoint;
pub mod dataset;
pub mod diffusion;
pub mod evaluation;
pub mod gradcheck;
pub mod error;
pub mod image;
pub(crate) mod nn;
pub mod params;
pub mod training;

pub use error::{CifeError, Result};
pub use image::ImageRGB;
pub use params::{Bound, ParamStore};
