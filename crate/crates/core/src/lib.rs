//! Invariance-regularized multi-step forecasting on synthetic and air-quality data.

pub mod diffnum;
pub mod ingest;
pub mod invariance;
pub mod models;
pub mod oracle;
pub mod rng;
pub mod semgen;
pub mod training;
