//! Noise model, robust gating and nonlinear least squares.

mod ba;
mod factors;
mod graph;
mod noise;
mod pose;
mod sim3;

pub use ba::{full_ba, local_ba, window_ba, BaObservation, BaProblem, BaReport, BaSettings, LocalBaSettings, MapBaReport};
pub use factors::{reprojection_jacobian, reprojection_residual, skew, ReprojectionFactor, ReprojectionJacobian};
pub use graph::{build_essential_graph, essential_graph_optimize, optimize_pose_graph, EdgeKind, GraphReport, GraphSettings, Sim3Edge};
pub use noise::{chi2_accepts, chi2_gate, huber, huber_weight, sigma, NoiseModel, CHI2_2DOF_95, SIGMA_FLOOR};
pub use pose::{pose_only_optimize, PoseObservation, PoseOnlyResult, PoseOnlySettings};
pub use sim3::{sim3_refine, Sim3Match, Sim3RefineResult, Sim3RefineSettings};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("tracking failure: {inliers} inliers")]
    TrackingFailure { inliers: usize },
    #[error("refinement failed: {0}")]
    RefineFailure(String),
}
