//! Vessel centerline estimation from streaming cross-sectional boundary
//! clouds, and a closed-loop simulator that steers a virtual ultrasound probe
//! normal to the vessel while keeping it centred in the image.

pub mod buffer;
pub mod centerline;
pub mod control;
pub mod error;
pub mod geometry;
pub mod phantom;
pub mod screening;
pub mod segmentation;

pub use error::{Error, Result};
