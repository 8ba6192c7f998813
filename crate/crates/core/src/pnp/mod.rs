//! Absolute pose estimation: P3P minimal solver, RANSAC and least-squares
//! refinement.

pub mod p3p;
pub mod ransac;
pub mod refine;

pub use p3p::solve_p3p;
pub use ransac::{
    estimate_pose, ransac_pnp, IndexedEstimate, NoPoseReason, PoseEstimate, RansacOutcome,
    RansacParams,
};
pub use refine::{refine_pose, reprojection_error, reprojection_jacobian};
