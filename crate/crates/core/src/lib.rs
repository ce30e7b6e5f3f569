//! Two-branch image anomaly detection.
//!
//! A student/teacher/autoencoder reconstruction branch scores anomalies that
//! have a location (the maximum of a combined anomaly map). A feature branch
//! scores anomalies that have none, using the Mahalanobis distance of globally
//! pooled network features under a Gaussian fitted to normal training images.
//! Both scores are standardized with validation statistics and summed.

pub mod backbone;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod fusion;
mod io;
pub mod kv;
pub mod linalg;
pub mod picturable;
pub mod report;
pub mod stats;
pub mod tensor;
pub mod unpicturable;

pub use error::{Error, ErrorCategory, Result};
