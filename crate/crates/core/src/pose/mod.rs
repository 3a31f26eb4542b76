//! Pose estimation from center correspondences and Wasserstein refinement.

mod p3p;
mod pnp;
mod refine;

pub use pnp::{pnp_from_centers, Correspondence};
pub use refine::{refine_pose, RefinementConfig, RefinementOutcome, ResidualMode, WassersteinObjective};
