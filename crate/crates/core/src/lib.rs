//! Localization of a drifting aerial odometry track against a georeferenced
//! tile map.
//!
//! Place recognition (k-means vocabulary, VLAD, top-K cosine retrieval) maps
//! keyframes to tile centers, DBSCAN rejects aliasing retrievals, a
//! gravity-constrained rigid alignment anchors the odometry frame, and a
//! two-dimensional Kalman filter fuses the result. A synthetic world and
//! drift simulator close the loop for evaluation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod dbscan;
pub mod error;
pub mod features;
pub mod fusion;
pub mod geo;
pub mod metrics;
pub mod pipeline;
pub mod retrieval;
pub mod scenario;
pub mod sim;
pub mod tiles;
pub mod vlad;

pub use error::{Error, Result};
pub use geo::{AnchorTransform, GeoPoint, GravityVector, OdomPose};
