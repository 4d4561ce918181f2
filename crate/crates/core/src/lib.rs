//! Cluster-routed state-space image restoration.
//!
//! The crate builds a small U-shaped restoration network whose bottleneck
//! replaces per-pixel sequence scanning with a handful of learned cluster
//! representatives: features are softly assigned to clusters, the recurrent
//! state-space update runs over the cluster set only, and the result is
//! diffused back to every pixel. Everything runs on a from-scratch
//! reverse-mode tape so gradients, costs and numerics are fully inspectable.

pub mod audit;
pub mod blocks;
pub mod cli;
pub mod cluster;
pub mod cost;
pub mod diffuse;
pub mod error;
pub mod fft;
pub mod image;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod optim;
pub mod params;
pub mod runconfig;
pub mod scalar;
pub mod scan;
pub mod tape;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
