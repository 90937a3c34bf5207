//! Simulated visuotactile sensing pipeline: a dot-matrix gel forward model,
//! Lucas–Kanade marker tracking, force estimation, vibrotactile shaping, a
//! slip test rig, the wire protocol and the teleoperation loop.

pub mod flowtrack;
pub mod forceest;
pub mod gelsim;
pub mod hapticmap;
pub mod image;
pub mod sliprig;
pub mod teleop;
pub mod wire;

/// Planar vector in pixel coordinates (x right, y down).
pub type Vec2 = nalgebra::Vector2<f64>;

pub use gelsim::{GelConfig, GelState, Wrench};
pub use image::GelImage;
