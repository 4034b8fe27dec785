//! Keyframe retrieval, relocalization and map merging.

mod database;
mod merge;
mod reloc;
mod vocabulary;

use std::sync::{Arc, OnceLock};

use thiserror::Error;

pub use database::{KeyFrameDatabase, Query, RetrievalMode};
pub use merge::{detect_merge, guided_matching, merge_maps, point_gt_tag, MergeCandidate, MergeReport, PointPair};
pub use reloc::{relocalize, RelocFailure, Relocalization};
pub use vocabulary::{BowVector, Vocabulary, VOCABULARY_MAGIC, VOCABULARY_VERSION};

use crate::map::Descriptor;
use crate::simulator::{generate_sequence, Scenario};

#[derive(Debug, Error)]
pub enum PlaceRecError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("vocabulary format: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("stale candidate: {0}")]
    Stale(String),
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PlaceRecParams {
    /// Candidates must score at least this fraction of the best score.
    pub relative_score: f64,
    /// Absolute score floor.
    pub min_score: f64,
    /// Retrieved keyframes tried per query.
    pub n_candidates: usize,
    pub nndr: f64,
    /// Sim(3) RANSAC threshold relative to the median scene depth.
    pub sim3_threshold: f64,
    pub sim3_iterations: usize,
    pub min_ransac_inliers: usize,
    pub merge_accept: usize,
    /// Guided matching window in pixels at octave 0.
    pub guided_radius: f64,
    pub min_similarity: f64,
}

impl Default for PlaceRecParams {
    fn default() -> Self {
        Self {
            relative_score: 0.75,
            min_score: 0.05,
            n_candidates: 3,
            nndr: 0.8,
            sim3_threshold: 0.1,
            sim3_iterations: 300,
            min_ransac_inliers: 15,
            merge_accept: 30,
            guided_radius: 8.0,
            min_similarity: 0.6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RelocParams {
    pub relative_score: f64,
    pub min_score: f64,
    pub n_candidates: usize,
    pub nndr: f64,
    pub min_similarity: f64,
    pub ransac_iterations: usize,
    /// Minimum PnP RANSAC inliers.
    pub ransac_inliers: usize,
    /// Minimum inliers after guided refinement.
    pub final_inliers: usize,
}

impl Default for RelocParams {
    fn default() -> Self {
        Self {
            relative_score: 0.75,
            min_score: 0.05,
            n_candidates: 3,
            nndr: 0.8,
            min_similarity: 0.6,
            ransac_iterations: 300,
            ransac_inliers: 12,
            final_inliers: 30,
        }
    }
}

pub const DEFAULT_BRANCHING: u32 = 10;
pub const DEFAULT_DEPTH: u32 = 4;
pub const DEFAULT_TRAINING_SEED: u64 = 0xB0C0;

/// Descriptors of a dedicated simulator sequence, one group per frame, about
/// 100k in total.
pub fn training_descriptors(seed: u64) -> Vec<Vec<Descriptor>> {
    let seq = generate_sequence(&Scenario::clean(400, seed)).expect("built-in scenario is valid");
    seq.frames.into_iter().map(|f| f.keypoints.into_iter().map(|k| k.descriptor).collect()).collect()
}

/// The vocabulary used when none is supplied. Trained once per process.
pub fn default_vocabulary() -> Arc<Vocabulary> {
    static VOCAB: OnceLock<Arc<Vocabulary>> = OnceLock::new();
    VOCAB
        .get_or_init(|| {
            let images = training_descriptors(DEFAULT_TRAINING_SEED);
            Arc::new(Vocabulary::train(&images, DEFAULT_BRANCHING, DEFAULT_DEPTH, DEFAULT_TRAINING_SEED).expect("training set is non-empty"))
        })
        .clone()
}
