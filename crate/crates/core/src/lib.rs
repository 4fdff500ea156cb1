//! Temporally consistent alignment of robot coordinate frames.
//!
//! Each robot keeps a sparse map of recently seen objects in its own
//! odometry frame. Pairs of maps are associated with a consistency-graph
//! solver that returns several near-optimal alignments per map exchange
//! ([`registration::mno_clipper`]), and a multi-hypothesis Kalman filter
//! ([`filter::TcaffFilter`]) keeps only the alignment that stays
//! consistent over time.
//!
//! The [`sim`] and [`harness`] modules generate synthetic multi-robot runs
//! and score the filter against ground truth.

pub mod clipper;
pub mod filter;
pub mod geometry;
pub mod harness;
pub mod object_map;
pub mod registration;
pub mod sim;

pub use clipper::{ClipperParams, ClipperProblem, ClipperSolution, PutativeAssociation};
pub use filter::{FilterParams, KalmanModel, Mode, TcaffFilter};
pub use geometry::{Gaussian3, Pose2};
pub use object_map::{MapParams, ObjectLandmark, ObjectMap};
pub use registration::{AlignmentMeasurement, MnoParams};
