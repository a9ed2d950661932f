//! One-class anomaly detection for human skeletal motion.
//!
//! A separable graph-convolutional encoder and a projector map sliding
//! windows of 2D joint trajectories into a latent space (Euclidean, Poincaré
//! ball or unit sphere). Training contracts the embeddings of normal motion
//! toward a center; at inference a window's distance from that center is its
//! anomaly score, which is aggregated per agent and per frame and evaluated
//! with frame-level ROC AUC.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod manifold;
pub mod model;
pub mod scoring;
pub mod tensor;
pub mod train;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
