//! Invariant-filter GNSS / visual / inertial odometry.
//!
//! The filter state lives on a product of matrix Lie groups (SE₂(3) for the
//! IMU, SE(3) for extrinsics and cloned camera poses, anchored landmarks) and
//! uses a right-invariant error, so the key Jacobians and the unobservable
//! directions of the system do not depend on the estimate. This crate is
//! `no_std` (it needs `alloc`) and contains all of the numerics:
//!
//! * [`geometry`]: Γ-functions, SO(3)/SE(3)/SE₂(3), WGS-84 frames
//! * [`state`]: state, error layout, ⊞/⊟, Kalman update, cloning,
//!   marginalization, delayed initialization
//! * [`propagation`]: analytic mean propagation, transition matrix, noise
//! * [`vision`]: triangulation, MSCKF / SLAM updates, key-frame policy, anchors
//! * [`gnss`]: pseudorange / Doppler models, SPP, alignment, GNSS update
//! * [`symmetry`]: degeneracy classification and observability checks
//! * [`simulator`]: synthetic trajectories and sensor streams
//! * [`estimator`]: the event loop tying everything together
//! * [`metrics`]: RMSE / NEES bookkeeping
//!
//! File formats, configuration parsing and the command line live in the
//! companion `ingvio` crate.

#![no_std]
// `!(x > 0.0)` style checks are deliberate: they reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod chi2;
pub mod estimator;
pub mod geometry;
pub mod gnss;
pub mod metrics;
pub mod propagation;
pub mod simulator;
pub mod state;
pub mod symmetry;
pub mod vision;

pub use geometry::{ExtendedPose, GeodeticPoint, Pose, Rotation};
pub use state::{Constellation, Covariance, NavState, StateLayout};

/// Gravity in the (ENU-like) world frame, m/s².
pub const GRAVITY: f64 = 9.81;

pub fn gravity_vector() -> geometry::Vec3 {
    geometry::Vec3::new(0.0, 0.0, -GRAVITY)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("state layouts differ")]
    LayoutMismatch,
    #[error("frame {0} already cloned")]
    DuplicateFrame(u64),
    #[error("frame {0} is not newer than the newest clone")]
    StaleFrame(u64),
    #[error("unknown frame {0}")]
    UnknownFrame(u64),
    #[error("unknown landmark {0}")]
    UnknownLandmark(u64),
    #[error("landmark {landmark} still anchored to frame {frame}")]
    DanglingAnchor { landmark: u64, frame: u64 },
    #[error("innovation covariance is not invertible")]
    SingularInnovation,
    #[error("new-state Jacobian is singular")]
    SingularInitialization,
    #[error("invalid geodetic point (lat {latitude}, lon {longitude})")]
    InvalidGeodetic { latitude: f64, longitude: f64 },
    #[error("point is within 1 km of the Earth center")]
    NearEarthCenter,
    #[error("insufficient satellites: have {have}, need {need}")]
    InsufficientSatellites { have: usize, need: usize },
    #[error("satellite geometry too weak (GDOP {0:.1})")]
    WeakGeometry(f64),
    #[error("iteration diverged")]
    Divergence,
    #[error("no clock state for {0:?}")]
    MissingClock(Constellation),
    #[error("satellites belong to different constellations")]
    ConstellationMismatch,
    #[error("insufficient motion for alignment ({span:.2} m horizontal span)")]
    InsufficientMotion { span: f64 },
    #[error("insufficient samples: have {have}, need {need}")]
    InsufficientSamples { have: usize, need: usize },
    #[error("time {t} outside [0, {duration}]")]
    TimeOutOfRange { t: f64, duration: f64 },
    #[error("non-positive depth")]
    NonPositiveDepth,
    #[error("triangulation rejected: {0}")]
    Triangulation(TriangulationFailure),
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("unsorted input stream: {0}")]
    Unsorted(&'static str),
    #[error("covariance lost positive semi-definiteness")]
    NotPositiveSemiDefinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriangulationFailure {
    TooFewObservations,
    InsufficientParallax,
    DepthOutOfBounds,
    LargeResidual,
    NotConverged,
}

impl core::fmt::Display for TriangulationFailure {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let s = match self {
            Self::TooFewObservations => "too few observations",
            Self::InsufficientParallax => "insufficient parallax",
            Self::DepthOutOfBounds => "depth out of bounds",
            Self::LargeResidual => "reprojection residual too large",
            Self::NotConverged => "Gauss-Newton did not converge",
        };
        f.write_str(s)
    }
}

pub type Result<T> = core::result::Result<T, Error>;
