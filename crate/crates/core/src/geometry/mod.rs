//! Rigid transforms, pinhole projection, dual-quadric projection and the
//! Gaussian Wasserstein distance between ellipses.

mod camera;
mod ellipse;
mod quadric;
mod se3;

pub use camera::CameraIntrinsics;
pub(crate) use ellipse::ellipse_bures_squared;
pub use ellipse::{inscribed_ellipse, wasserstein2, BoundingBox, Ellipse2D};
pub use quadric::{project_center, project_quadric, DualQuadric};
pub use se3::PoseSE3;

/// Minimum camera-frame depth for a point to count as in front of the camera.
pub const MIN_DEPTH: f64 = 1e-6;
