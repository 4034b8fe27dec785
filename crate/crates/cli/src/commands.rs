use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use atlas_slam::evaluation::{ate, coverage, coverage_timeline, default_tolerance, map_stats, multi_map_ate, timeline_csv, MapAte};
use atlas_slam::io::{read_trajectory_file, write_trajectory_file, ConfigFile};
use atlas_slam::map::AtlasDocument;
use atlas_slam::pipeline::{build_core, run as run_pipeline, PipelineConfig, PipelineError, RunLog, RunMode};
use atlas_slam::placerec::{training_descriptors, Vocabulary};
use atlas_slam::simulator::{generate_sequence, load_sequence_dir, Scenario};

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Invariant(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "{m}"),
            CliError::Invariant(m) => write!(f, "invariant violated: {m}"),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Invariant(m) => CliError::Invariant(m),
            other => CliError::Input(other.to_string()),
        }
    }
}

fn input<E: std::fmt::Display>(context: impl std::fmt::Display) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Input(format!("{context}: {e}"))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(input(path.display()))
}

pub fn simulate(config: &Path, out: &Path) -> Result<(), CliError> {
    let file = ConfigFile::load(config).map_err(input(config.display()))?;
    let scenario = Scenario::from_config(file).map_err(input(config.display()))?;
    let seq = generate_sequence(&scenario).map_err(input("simulation"))?;
    seq.write_dir(out).map_err(input(out.display()))?;
    println!("seed {} frames {}", scenario.seed, seq.frames.len());
    Ok(())
}

pub fn run(sequence: &Path, config: Option<&Path>, out: &Path, mode: RunMode, seed: Option<u64>, vocabulary: Option<PathBuf>) -> Result<(), CliError> {
    let mut cfg = match config {
        Some(p) => {
            let file = ConfigFile::load(p).map_err(input(p.display()))?;
            PipelineConfig::from_config(file).map_err(input(p.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if vocabulary.is_some() {
        cfg.vocabulary = vocabulary;
    }
    let seq = load_sequence_dir(sequence).map_err(input(sequence.display()))?;
    let n_frames = seq.frames.len();
    let core = build_core(cfg, seq.camera(), None)?;
    let output = run_pipeline(core, seq.frames, mode)?;

    fs::create_dir_all(out).map_err(input(out.display()))?;
    write_trajectory_file(&out.join("trajectory.txt"), &output.trajectory).map_err(input("trajectory.txt"))?;
    let json = |r: serde_json::Result<String>| r.map(|s| s + "\n").map_err(input("serialization"));
    write_file(&out.join("runlog.json"), &json(output.log.to_json())?)?;
    let stats = map_stats(&output.atlas, &output.log);
    write_file(&out.join("stats.json"), &json(stats.to_json())?)?;
    write_file(&out.join("timeline.csv"), &timeline_csv(&coverage_timeline(&output.log)))?;
    write_file(&out.join("atlas.json"), &json(AtlasDocument::from(&output.atlas).to_json())?)?;

    let g = &stats.global;
    println!(
        "frames {n_frames} coverage {:.2}% maps {} (created {}) merges {} relocations {} keyframes {} points {}",
        g.coverage_pct, g.n_maps, g.n_maps_created, g.n_merges, g.n_relocations, g.n_kf, g.n_mp
    );
    if !seq.gt.is_empty() {
        if let Ok(a) = multi_map_ate(&output.trajectory, &seq.gt, default_tolerance(&seq.gt)) {
            println!("rms ate {:.4} over {} frames", a.rms, a.n_associated);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    rms_ate: f64,
    n_associated: usize,
    scale: f64,
    multi_map_rms_ate: Option<f64>,
    per_map: Vec<MapAte>,
    #[serde(skip_serializing_if = "Option::is_none")]
    coverage_pct: Option<f64>,
}

pub fn eval(estimate: &Path, gt: &Path, runlog: Option<&Path>, tolerance: Option<f64>) -> Result<(), CliError> {
    let est = read_trajectory_file(estimate).map_err(input(estimate.display()))?;
    let gt_entries = read_trajectory_file(gt).map_err(input(gt.display()))?;
    let tol = tolerance.unwrap_or_else(|| default_tolerance(&gt_entries));
    if !(tol.is_finite() && tol >= 0.0) {
        return Err(CliError::Input(format!("bad tolerance {tol}")));
    }
    let single = ate(&est, &gt_entries, tol).map_err(input("evaluation"))?;
    let multi = multi_map_ate(&est, &gt_entries, tol).ok();
    let coverage_pct = match runlog {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(input(p.display()))?;
            let log: RunLog = serde_json::from_str(&text).map_err(input(p.display()))?;
            Some(coverage(&log, log.n_frames()).map_err(input(p.display()))?)
        }
        None => None,
    };
    let report = EvalReport {
        rms_ate: single.rms,
        n_associated: single.n_associated,
        scale: single.scale,
        multi_map_rms_ate: multi.as_ref().map(|m| m.rms),
        per_map: multi.map(|m| m.per_map).unwrap_or_default(),
        coverage_pct,
    };
    println!("{}", serde_json::to_string_pretty(&report).map_err(input("serialization"))?);
    Ok(())
}

pub fn vocab(out: &Path, sequence: Option<&Path>, branching: u32, depth: u32, seed: u64) -> Result<(), CliError> {
    let images = match sequence {
        Some(dir) => {
            let seq = load_sequence_dir(dir).map_err(input(dir.display()))?;
            seq.frames.into_iter().map(|f| f.keypoints.into_iter().map(|k| k.descriptor).collect()).collect()
        }
        None => training_descriptors(seed),
    };
    let v = Vocabulary::train(&images, branching, depth, seed).map_err(input("training"))?;
    v.save(out).map_err(input(out.display()))?;
    println!("words {} branching {branching} depth {depth}", v.n_words());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::from(PipelineError::Invariant("edge".into())).exit_code(), 3);
        assert_eq!(CliError::from(PipelineError::InvalidInput("camera".into())).exit_code(), 2);
        assert!(CliError::Invariant("atlas has 2 active maps".into()).to_string().contains("2 active maps"));
    }
}
