//! Direct monocular visual odometry that fuses photometric alignment with
//! single-view inverse-depth predictions in a windowed bundle adjustment,
//! yielding metric-scale trajectories.

pub mod ba;
pub mod config;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod io;
pub mod jacobian_check;
pub mod parallel;
pub mod pipeline;
pub mod residuals;
pub mod robust;
pub mod synthetic;
pub mod mapping;
pub mod tracking;
