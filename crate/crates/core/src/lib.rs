//! Multimodal, multi-view virtual biopsy pipeline: preprocessing, pluggable
//! per-channel scorers and CESM generators, MCC-weighted late fusion,
//! classification and image-quality metrics, and a cross-validated evaluation
//! harness with a missing-modality robustness sweep.

pub mod commands;
pub mod config;
pub mod domain;
pub mod error;
pub mod fixture;
pub mod fusion;
pub mod generators;
pub mod harness;
pub mod manifest;
pub mod metrics;
pub mod output;
pub mod preprocess;
pub mod raster;
pub mod scorers;
pub mod seed;

pub use domain::{
    AcrCategory, BiopsyLabel, Channel, GrayImage, Laterality, Modality, Phase, RecordKey,
    StudyRecord, View,
};
pub use error::{Error, Result};
pub use seed::{derive_rng, SeedPath, Stream};
