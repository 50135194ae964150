//! On-disk inputs: feature files, album manifests and the synthetic generator.

pub mod kagf;
pub mod manifest;
pub mod synth;

pub use kagf::{read_feature_file, write_feature_file};
pub use manifest::{parse_manifest, AlbumRecord, ImageEntry};
