//! Volume-to-volume diffusion with two perpendicular 2D denoisers whose
//! scores are fused by a learned 3D network.

pub mod branch;
pub mod checkpoint;
pub mod config;
pub mod degrade;
mod error;
pub mod fusion;
pub mod io;
pub mod metrics;
pub mod net2d;
pub mod net3d;
pub mod phantom;
pub mod sample;
pub mod schedule;
pub mod task;
pub mod train;
pub mod unet;
pub mod volume;

pub use error::{Error, ParseError, Result};
pub use volume::Volume;
