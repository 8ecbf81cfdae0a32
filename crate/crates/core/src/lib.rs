//! Test-time fitting of an articulated skeleton to 2D keypoints with
//! distribution-based adaptive updates, selective parameter caching and a
//! first-order meta-learned initializer.
//!
//! The crate is organised bottom-up:
//!
//! - [`body_model`]: kinematic tree, axis-angle rotations, forward kinematics.
//! - [`energy`]: weak-perspective projection, fitting energy and its gradients.
//! - [`optimizer`]: the adaptive refinement loop and its building blocks.
//! - [`meta`]: the feedforward initializer and its meta-training.
//! - [`tasks`]: seeded synthetic task generation with domain profiles.
//! - [`metrics`]: MPJPE, Procrustes-aligned MPJPE, rank correlation.
//! - [`experiments`]: experiment drivers that write the CSV reports.

pub mod body_model;
pub mod energy;
mod error;
pub mod experiments;
pub mod meta;
pub mod metrics;
pub mod optimizer;
pub mod rng;
pub mod tasks;

pub use body_model::{FitParams, KinematicTree, SHAPE_DIM};
pub use energy::{EnergyConfig, Observation};
pub use error::{Error, Result};
pub use meta::{MetaConfig, Regressor};
pub use optimizer::{OptimizerConfig, RefinementResult};
pub use tasks::{DomainProfile, TaskRecord};

/// Maps `f` over `items`, in parallel when the `parallel` feature is on.
/// Output order always follows input order.
#[cfg(feature = "parallel")]
pub(crate) fn map_tasks<T: Sync, R: Send, F: Fn(&T) -> R + Sync + Send>(items: &[T], f: F) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_tasks<T: Sync, R: Send, F: Fn(&T) -> R + Sync + Send>(items: &[T], f: F) -> Vec<R> {
    items.iter().map(f).collect()
}
