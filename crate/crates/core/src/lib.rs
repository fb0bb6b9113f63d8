//! Training-free object dragging for blob-grounded diffusion models.
//!
//! The crate is organized bottom-up:
//!
//! - [`blobgeom`]: ellipse parameters, masks, rasterization and fitting
//! - [`schedule`]: DDPM noise schedule and deterministic DDIM steps
//! - [`attnctl`]: attention masking, sharing, anchoring and NN copying
//! - [`denoiser`]: the pluggable noise predictor and a toy network
//! - [`pipeline`]: generated-image and real-image drag loops
//! - [`eval`]: foreground similarity, object traces and KID
//! - [`io`] and [`cli`]: file formats and command implementations

pub mod attnctl;
pub mod blobgeom;
pub mod cli;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod io;
pub mod pipeline;
pub mod schedule;
pub mod seed;

pub use error::{Error, Result};

/// `H x W x C` grid of reals: an image latent or a feature map.
pub type Latent = ndarray::Array3<f64>;
