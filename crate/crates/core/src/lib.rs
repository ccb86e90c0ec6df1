//! Co-speech gesture video generation: a self-supervised image animation
//! model driven by latent motion features, a diffusion model over those
//! features, and the evaluation metrics used to compare variants.

pub mod deviation;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod media_io;
pub mod metrics;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};
