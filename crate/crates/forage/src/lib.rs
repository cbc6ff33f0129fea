//! Food-acquisition metrics from raw GPS ping streams.
//!
//! The pipeline turns two inputs — a mobile ping stream and a classified
//! food-outlet catalog — into per-device staypoints, inferred home
//! locations, outlet visits, distance/frequency metrics, and
//! spatiotemporal aggregates. A seeded synthetic world generator stands in
//! for vendor data so every stage can be exercised end to end.
//!
//! Stages communicate through flat files (CSV/JSON) so any stage can be
//! re-run or audited in isolation; see [`pipeline`] for the wiring.

pub mod aggregate;
pub mod clock;
pub mod config;
pub mod files;
pub mod geo;
pub mod home;
pub mod ingest;
pub mod metrics;
pub mod outlets;
pub mod pipeline;
pub mod routing;
pub mod stays;
pub mod sweep;
pub mod synth;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path} is missing required column `{column}`")]
    MissingColumn { path: PathBuf, column: String },

    #[error("invalid input in {path}: {reason}")]
    Input { path: PathBuf, reason: String },

    #[error("query radius {radius_m} m exceeds index maximum {max_radius_m} m")]
    RadiusExceedsIndex { radius_m: f64, max_radius_m: f64 },

    #[error("unknown timezone `{0}`")]
    Timezone(String),

    #[error("road network problem: {0}")]
    Graph(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn input(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Input { path: path.into(), reason: reason.into() }
    }
}
