use std::path::PathBuf;

use crate::camera::FisheyeCamera;
use crate::features::{DEFAULT_BORDER_MARGIN, DEFAULT_DILATION_BASE, DEFAULT_INTENSITY_THRESHOLD};
use crate::io::{take_camera, ConfigFile, IoError};
use crate::mapping::MappingParams;
use crate::map::DEFAULT_COVIS_THRESHOLD;
use crate::optim::NoiseModel;
use crate::placerec::{PlaceRecParams, RelocParams, RetrievalMode};
use crate::tracking::TrackingParams;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskParams {
    pub enabled: bool,
    pub intensity_threshold: f64,
    pub border_margin: f64,
    pub dilation_base: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            enabled: true,
            intensity_threshold: DEFAULT_INTENSITY_THRESHOLD,
            border_margin: DEFAULT_BORDER_MARGIN,
            dilation_base: DEFAULT_DILATION_BASE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Taken from the sequence when absent.
    pub camera: Option<FisheyeCamera>,
    pub noise: NoiseModel,
    pub seed: u64,
    pub tracking: TrackingParams,
    pub reloc: RelocParams,
    pub placerec: PlaceRecParams,
    pub mapping: MappingParams,
    pub masks: MaskParams,
    pub covis_threshold: u32,
    /// Covisibility weight for essential-graph edges.
    pub theta_essential: u32,
    pub retrieval: RetrievalMode,
    pub vocabulary: Option<PathBuf>,
    pub merging: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            camera: None,
            noise: NoiseModel::default(),
            seed: 0,
            tracking: TrackingParams::default(),
            reloc: RelocParams::default(),
            placerec: PlaceRecParams::default(),
            mapping: MappingParams::default(),
            masks: MaskParams::default(),
            covis_threshold: DEFAULT_COVIS_THRESHOLD,
            theta_essential: 100,
            retrieval: RetrievalMode::Bow,
            vocabulary: None,
            merging: true,
        }
    }
}

impl PipelineConfig {
    /// Reads every known key of `file`; unknown keys are errors.
    pub fn from_config(mut file: ConfigFile) -> Result<Self, IoError> {
        let mut c = Self::default();
        let (mut k, mut s0) = (c.noise.k, c.noise.sigma0);
        file.take("noise.k", &mut k)?;
        file.take("noise.sigma0", &mut s0)?;
        c.noise = NoiseModel::new(k, s0).map_err(|e| IoError::BadValue { key: "noise".into(), msg: e.to_string() })?;
        file.take("ransac.seed", &mut c.seed)?;

        c.camera = take_camera(&mut file)?;

        let t = &mut c.tracking;
        file.take("thresholds.theta_track", &mut t.theta_track)?;
        file.take("thresholds.theta_init", &mut t.theta_init)?;
        file.take("thresholds.max_kf_interval", &mut t.max_kf_interval)?;
        file.take("thresholds.kf_match_ratio", &mut t.kf_match_ratio)?;
        file.take("thresholds.queue_cap", &mut t.queue_cap)?;
        file.take("thresholds.disp_win", &mut t.disp_win)?;
        file.take("thresholds.eps_init", &mut t.eps_init)?;
        file.take("thresholds.parallax_min_deg", &mut t.parallax_min_deg)?;
        file.take("thresholds.theta_ellipse", &mut t.theta_ellipse)?;
        file.take("thresholds.nndr", &mut t.nndr)?;
        file.take("thresholds.search_radius", &mut t.search.radius)?;
        file.take("thresholds.min_similarity", &mut t.search.min_similarity)?;
        c.mapping.parallax_min_deg = t.parallax_min_deg;
        c.mapping.creation_nndr = t.nndr;
        c.placerec.nndr = t.nndr;
        c.reloc.nndr = t.nndr;
        file.take("thresholds.merge_accept", &mut c.placerec.merge_accept)?;
        file.take("thresholds.reloc_ransac", &mut c.reloc.ransac_inliers)?;
        file.take("thresholds.reloc_final", &mut c.reloc.final_inliers)?;
        file.take("thresholds.bow_min_score", &mut c.placerec.min_score)?;
        c.reloc.min_score = c.placerec.min_score;
        file.take("thresholds.covisibility", &mut c.covis_threshold)?;
        file.take("thresholds.essential", &mut c.theta_essential)?;
        file.take("thresholds.cull_found_ratio", &mut c.mapping.cull_found_ratio)?;
        file.take("thresholds.kf_redundancy", &mut c.mapping.kf_redundancy)?;

        file.take("masks.enabled", &mut c.masks.enabled)?;
        file.take("masks.intensity_threshold", &mut c.masks.intensity_threshold)?;
        file.take("masks.border_margin", &mut c.masks.border_margin)?;
        file.take("masks.dilation_base", &mut c.masks.dilation_base)?;

        let mut retrieval = String::from("bow");
        file.take("placerec.retrieval", &mut retrieval)?;
        c.retrieval = match retrieval.as_str() {
            "bow" => RetrievalMode::Bow,
            "exhaustive" => RetrievalMode::Exhaustive,
            other => return Err(IoError::BadValue { key: "placerec.retrieval".into(), msg: format!("unknown mode '{other}'") }),
        };
        file.take("placerec.merging", &mut c.merging)?;
        if file.contains("placerec.vocabulary") {
            let mut p = String::new();
            file.take("placerec.vocabulary", &mut p)?;
            c.vocabulary = Some(PathBuf::from(p));
        }
        file.finish()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self, IoError> {
        Self::from_config(ConfigFile::parse(text)?)
    }
}
