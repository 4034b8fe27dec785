//! Descriptor similarity, brute-force ratio-test matching and reflection masks.

mod feature_file;
mod mask;
mod matching;

pub use feature_file::{read_feature_file, write_feature_file, FeatureRecord, FEATURE_FILE_HEADER};
pub use mask::{
    build_masks, filter_keypoints, keypoint_mask, sparse_keypoint_mask, IntensityGrid, OctaveMaskSet,
    DEFAULT_BORDER_MARGIN, DEFAULT_DILATION_BASE, DEFAULT_INTENSITY_THRESHOLD,
};
pub use matching::{bf_match_bidirectional, bf_match_nndr, similarity, MatchPair, MatchSet, DEFAULT_NNDR};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("descriptor norm {0} is not 1")]
    InvalidDescriptor(f64),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("feature file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for FeatureError {
    fn from(e: std::io::Error) -> Self {
        FeatureError::Io(e.to_string())
    }
}
