//! Vessel segmentation from 3D volumes through 2D projections.
//!
//! The crate bundles a small reverse-mode autodiff engine, rotation-based
//! projection and backprojection operators, 2D/3D U-nets, the projection
//! network built from them, a synthetic vessel phantom generator, overlap
//! metrics and the training loops.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod net25d;
pub mod optim;
mod par;
pub mod params;
pub mod phantom;
pub mod projection;
pub(crate) mod seed;
pub mod tensor;
pub mod train;
pub mod unet;
pub mod volume;

pub use error::{Error, Result};
pub use par::{init_threads, threads};
pub use tensor::{Real, Tensor};
pub use volume::{Image, Volume};
