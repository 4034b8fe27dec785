use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClutterSpec, Occlusion, Revisit, SceneSpec, Segment, SensorSpec, TrajectorySpec};
use crate::camera::FisheyeCamera;
use crate::geometry::derive_seed;
use crate::io::{take_camera, ConfigFile, IoError};

/// Everything needed to regenerate a sequence bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub scene: SceneSpec,
    pub trajectory: TrajectorySpec,
    pub clutter: ClutterSpec,
    pub sensor: SensorSpec,
    pub camera: FisheyeCamera,
}

pub const WITHDRAW_SPEED: f64 = 0.45;
const ADVANCE_SPEED: f64 = 0.9;
const OCCLUSION_FRAMES: usize = 25;
const JUMP_FRAMES: usize = 12;
const JUMP_SPEED: f64 = 6.0;
/// How far past the pre-loss position a revisit goes (mm).
const REVISIT_OVERSHOOT: f64 = 20.0;

pub fn default_camera() -> FisheyeCamera {
    FisheyeCamera::new(300.0, 300.0, 320.0, 240.0, [-0.01, 0.002, 0.0, 0.0], 640, 480).expect("valid intrinsics")
}

impl Scenario {
    /// Plain withdrawal without clutter events.
    pub fn clean(n_frames: usize, seed: u64) -> Self {
        Self::scripted(n_frames, 0, 0, seed)
    }

    /// Withdrawal with `n_losses` occlusions, the first `n_revisits` of which
    /// move the camera out of the mapped region and are followed by a pass
    /// that returns to it. The remaining losses keep the camera in place.
    pub fn scripted(n_frames: usize, n_losses: usize, n_revisits: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7ca1));
        let n_revisits = n_revisits.min(n_losses);
        let scene = SceneSpec { descriptor_seed: seed, ..Default::default() };
        let mut trajectory = TrajectorySpec {
            start_s: rng.random_range(1060.0..1130.0),
            scan_phase: rng.random_range(0.0..std::f64::consts::TAU),
            wobble_period: rng.random_range(150.0..200.0),
            smoothing: 6.0,
            segments: Vec::new(),
            ..Default::default()
        };
        let mut clutter = ClutterSpec::default();
        let mut segs = Vec::new();
        let mut frame = 0usize;
        let push = |segs: &mut Vec<Segment>, frame: &mut usize, s: Segment| {
            *frame += s.frames();
            segs.push(s);
        };
        let warm = rng.random_range(260..340).min(n_frames);
        push(&mut segs, &mut frame, Segment::Withdraw { frames: warm, speed: WITHDRAW_SPEED });
        for i in 0..n_losses {
            let start = frame;
            if i < n_revisits {
                push(&mut segs, &mut frame, Segment::Withdraw { frames: JUMP_FRAMES, speed: JUMP_SPEED });
                push(&mut segs, &mut frame, Segment::Withdraw { frames: OCCLUSION_FRAMES - JUMP_FRAMES, speed: WITHDRAW_SPEED });
                clutter.occlusions.push(Occlusion { start, end: frame, dropout: 1.0 });
                let away = 100;
                push(&mut segs, &mut frame, Segment::Withdraw { frames: away, speed: WITHDRAW_SPEED });
                // distance back to the pre-loss position, plus overshoot
                let back = JUMP_FRAMES as f64 * JUMP_SPEED * 0.85 + (OCCLUSION_FRAMES - JUMP_FRAMES + away) as f64 * WITHDRAW_SPEED + REVISIT_OVERSHOOT;
                let adv = (back / ADVANCE_SPEED).round() as usize;
                let rs = frame;
                push(&mut segs, &mut frame, Segment::Advance { frames: adv, speed: ADVANCE_SPEED });
                clutter.revisits.push(Revisit { start: rs, end: frame });
                push(&mut segs, &mut frame, Segment::Withdraw { frames: 200, speed: WITHDRAW_SPEED });
            } else {
                push(&mut segs, &mut frame, Segment::Hold { frames: OCCLUSION_FRAMES });
                clutter.occlusions.push(Occlusion { start, end: frame, dropout: 1.0 });
                push(&mut segs, &mut frame, Segment::Withdraw { frames: 150, speed: WITHDRAW_SPEED });
            }
        }
        // trim or extend to the requested length
        let mut total = 0usize;
        let mut trimmed = Vec::new();
        for s in segs {
            if total >= n_frames {
                break;
            }
            let take = s.frames().min(n_frames - total);
            trimmed.push(match s {
                Segment::Withdraw { speed, .. } => Segment::Withdraw { frames: take, speed },
                Segment::Advance { speed, .. } => Segment::Advance { frames: take, speed },
                Segment::Hold { .. } => Segment::Hold { frames: take },
            });
            total += take;
        }
        if total < n_frames {
            trimmed.push(Segment::Withdraw { frames: n_frames - total, speed: WITHDRAW_SPEED });
        }
        trajectory.segments = trimmed;
        clutter.occlusions.retain(|o| o.start < n_frames);
        for o in clutter.occlusions.iter_mut() {
            o.end = o.end.min(n_frames);
        }
        clutter.revisits.retain(|r| r.end <= n_frames);
        Self { seed, scene, trajectory, clutter, sensor: SensorSpec::default(), camera: default_camera() }
    }

    pub fn n_frames(&self) -> usize {
        self.trajectory.n_frames()
    }

    /// Builds a scripted scenario from `sim.frames`, `sim.losses`,
    /// `sim.revisits` and `sim.seed`, then applies the `scene.*`,
    /// `trajectory.*`, `sensor.*`, `clutter.*` and `camera.*` overrides.
    pub fn from_config(mut file: ConfigFile) -> Result<Self, IoError> {
        let (mut frames, mut losses, mut revisits, mut seed) = (500usize, 0usize, 0usize, 0u64);
        file.take("sim.frames", &mut frames)?;
        file.take("sim.losses", &mut losses)?;
        file.take("sim.revisits", &mut revisits)?;
        file.take("sim.seed", &mut seed)?;
        if frames == 0 {
            return Err(IoError::BadValue { key: "sim.frames".into(), msg: "must be positive".into() });
        }
        let mut sc = Self::scripted(frames, losses, revisits, seed);
        let s = &mut sc.scene;
        file.take("scene.length", &mut s.length)?;
        file.take("scene.radius", &mut s.radius)?;
        file.take("scene.radius_variation", &mut s.radius_variation)?;
        file.take("scene.landmarks", &mut s.n_landmarks)?;
        file.take("scene.descriptor_density", &mut s.descriptor_density)?;
        let t = &mut sc.trajectory;
        file.take("trajectory.start_s", &mut t.start_s)?;
        file.take("trajectory.fps", &mut t.fps)?;
        file.take("trajectory.scan_radius", &mut t.scan_radius)?;
        file.take("trajectory.scan_period", &mut t.scan_period)?;
        file.take("trajectory.wobble_deg", &mut t.wobble_deg)?;
        file.take("trajectory.smoothing", &mut t.smoothing)?;
        file.take("trajectory.wall_margin", &mut t.wall_margin)?;
        let n = &mut sc.sensor;
        file.take("sensor.pixel_sigma", &mut n.pixel_sigma)?;
        file.take("sensor.max_range", &mut n.max_range)?;
        file.take("sensor.deformation_amplitude", &mut n.deformation_amplitude)?;
        file.take("sensor.deformation_period", &mut n.deformation_period)?;
        file.take("clutter.descriptor_sigma", &mut sc.clutter.descriptor_sigma)?;
        file.take("clutter.specular_rate", &mut sc.clutter.specular_rate)?;
        if let Some(c) = take_camera(&mut file)? {
            sc.camera = c;
        }
        file.finish()?;
        Ok(sc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_layout() {
        let s = Scenario::scripted(2000, 3, 2, 4);
        assert_eq!(s.n_frames(), 2000);
        assert_eq!(s.clutter.occlusions.len(), 3);
        assert_eq!(s.clutter.revisits.len(), 2);
        assert!(s.clutter.occlusions.iter().all(|o| o.end - o.start >= 10 && o.dropout >= 0.9));
        let c = Scenario::clean(500, 1);
        assert!(c.clutter.occlusions.is_empty() && c.n_frames() == 500);
    }

    #[test]
    fn config_overrides() {
        let sc = Scenario::from_config(ConfigFile::parse("sim.frames = 100\nsim.seed = 3\nsensor.pixel_sigma = 0.25\n").unwrap()).unwrap();
        assert_eq!(sc.n_frames(), 100);
        assert_eq!(sc.sensor.pixel_sigma, 0.25);
        assert_eq!(sc, {
            let mut d = Scenario::clean(100, 3);
            d.sensor.pixel_sigma = 0.25;
            d
        });
        assert!(matches!(Scenario::from_config(ConfigFile::parse("sim.frame = 100").unwrap()), Err(IoError::UnknownKey { .. })));
        assert!(Scenario::from_config(ConfigFile::parse("sim.frames = 0").unwrap()).is_err());
    }
}
