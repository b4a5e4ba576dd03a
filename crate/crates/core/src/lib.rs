//! Next-scale autoregressive generation with latent scale rejection sampling
//! on a synthetic structured-image world.

pub mod binio;
pub mod config;
pub mod error;
pub mod eval;
pub mod lsrs;
pub mod msvq;
pub mod prior;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
