//! Ad-delivery skew auditing and ad-stream profile reconstruction.
//!
//! The crate covers the whole pipeline: impression ingestion, KDE-based
//! sessionization, LLM-backed ad feature extraction, descriptive exposure
//! metrics, NB2 regression with cluster-robust inference, two-stage
//! demographic reconstruction and its evaluation against census baselines.

pub mod audit;
pub mod config;
pub mod demographics;
pub mod error;
pub mod evaluate;
pub mod features;
pub mod ingest;
pub mod linalg;
pub mod llm;
pub mod nbr;
pub mod pipeline;
pub mod reconstruct;
pub mod scalar;
pub mod sessionize;
pub mod synth;
pub mod template;

pub use demographics::{Attribute, DemographicProfile};
pub use error::{Error, Result};
pub use ingest::{AdImpression, CohortDataset};
pub use scalar::Scalar;
pub use sessionize::{Session, SessionizerConfig};

pub type GapDistribution = sessionize::GapDistribution<f64>;
pub type Matrix = linalg::Matrix<f64>;
pub type FitResult = nbr::FitResult<f64>;
pub type ModelFit = nbr::ModelFit<f64>;
