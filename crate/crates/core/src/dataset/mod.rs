//! Fingerprint collections: labels, manifests and splits.

mod label;
mod manifest;
mod socofing;
mod split;

use thiserror::Error;

pub use label::{Alteration, Finger, Gender, Hand, RecordLabel, Severity};
pub use manifest::{build_manifest, Manifest, ManifestBuild, ManifestEntry, Scheme, Skipped, MANIFEST_FILE};
pub use socofing::{has_image_extension, parse_socofing_name, render_socofing_name};
pub use split::{
    apportion, split, split_by_subject, split_manifest, SplitAssignment, SplitFractions, SplitMode,
    SplitPart,
};

pub use crate::image::load_image;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("malformed file name: {0}")]
    MalformedName(String),
    #[error("no parseable images under {0}")]
    EmptyDataset(String),
    #[error("duplicate manifest path {0}")]
    DuplicatePath(String),
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("degenerate stratum: {0}")]
    DegenerateStratum(String),
    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}
