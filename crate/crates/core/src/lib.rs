//! Magneto-inductive near-field 3D localization of a single-coil agent with
//! unknown orientation.
//!
//! The crate contains the dipole forward model ([`physics`]), Fisher
//! information and error bounds ([`fisher`]), a Levenberg-Marquardt solver
//! ([`lm`]), the exact unit-norm orientation step ([`orientation`]), the
//! position estimators built from them ([`estimators`]) and a seeded Monte
//! Carlo harness ([`sim`]).

pub mod error;
pub mod estimators;
pub mod fisher;
pub mod lm;
pub mod orientation;
pub mod physics;
pub mod sim;

pub use error::{Error, Result};
pub use estimators::{Algorithm, InitSampler, PoseEstimate};
pub use fisher::{BoundReport, FisherMatrix, SignalGradient};
pub use lm::{ResidualProblem, SolverOptions, SolverResult, Termination};
pub use orientation::{ConstrainedLsInstance, ConstrainedLsSolution};
pub use physics::{
    Anchor, AnchorTopology, CoilSpec, LinkGeometry, MeasurementVector, PhysicalParams, Pose,
    SphericalOrientation, UnitVec3, Vec3,
};
pub use sim::{ExperimentConfig, Room};
