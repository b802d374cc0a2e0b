//! Geosocial location classification toolkit.
//!
//! Infers the type of a geospatial site (school, university, church, shop,
//! museum, health facility) from the set of geotagged messages posted within
//! a small radius of it. Two approaches are provided: a pipeline model that
//! classifies each message and aggregates the predicted-label distribution,
//! and a joint model that classifies the whole message set at once. Both are
//! available with linear classifiers (logistic regression, multinomial Naive
//! Bayes) and a convolutional net over word embeddings.
//!
//! The crate also ships the supporting machinery: JSONL ingestion with a
//! radius join, sparse feature extraction, smoothed n-gram language models,
//! a synthetic corpus generator, and an evaluation harness with repeated
//! random splits, ablation tables and corpus analysis reports.

use thiserror::Error;

pub mod classifiers;
pub mod config;
pub mod domain;
pub mod evaluation;
pub mod features;
pub mod ingest;
pub mod langmodel;
pub mod neural;
pub mod pipeline;
pub mod synth;

mod util;

pub use domain::{haversine_m, GeoPoint, GeotaggedMessage, LocationType, SiteRecord, TypeCatalog};
pub use features::{FamilySet, FeatureFamily, FeatureRegistry, FeatureVector};

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("coordinate out of bounds: lat {lat}, lon {lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path} line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{malformed} of {total} lines malformed in {path} (over 1% budget)")]
    TooManyMalformedLines {
        path: String,
        malformed: usize,
        total: usize,
    },
    #[error("duplicate entity id: {0}")]
    DuplicateEntityId(String),
    #[error("training failed: {0}")]
    Train(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("embedding file {path}: {message}")]
    Embedding { path: String, message: String },
}

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
