use std::f64::consts::TAU;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::scene::random_descriptor;
use super::Scene;
use crate::camera::{FisheyeCamera, SE3Pose};
use crate::features::IntensityGrid;
use crate::geometry::derive_seed;
use crate::map::{Descriptor, Frame, KeyPoint, LandmarkTag, DESCRIPTOR_LEN};

/// Frames `[start, end)` in which each landmark keypoint is dropped with
/// probability `dropout`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occlusion {
    pub start: usize,
    pub end: usize,
    pub dropout: f64,
}

/// Frames `[start, end)` scripted to re-observe an earlier region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Revisit {
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClutterSpec {
    pub occlusions: Vec<Occlusion>,
    pub descriptor_sigma: f64,
    /// Mean number of specular keypoints per frame.
    pub specular_rate: f64,
    pub revisits: Vec<Revisit>,
}

impl Default for ClutterSpec {
    fn default() -> Self {
        Self { occlusions: Vec::new(), descriptor_sigma: 0.05, specular_rate: 6.0, revisits: Vec::new() }
    }
}

impl ClutterSpec {
    pub fn clean() -> Self {
        Self { specular_rate: 0.0, ..Default::default() }
    }

    pub fn dropout_at(&self, frame: usize) -> f64 {
        self.occlusions
            .iter()
            .filter(|o| (o.start..o.end).contains(&frame))
            .map(|o| o.dropout)
            .fold(0.0, f64::max)
    }
}

/// Sensor and visibility model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    /// Pixel noise at octave 0; doubles per octave. Truncated at 5σ.
    pub pixel_sigma: f64,
    pub max_range: f64,
    pub min_depth: f64,
    /// Largest angle between the optical axis and a visible ray.
    pub max_view_angle_deg: f64,
    /// Largest angle between the wall normal and the viewing ray.
    pub max_incidence_deg: f64,
    pub n_octaves: u8,
    /// Feature size (px) at which octave 1 starts.
    pub octave_base_px: f64,
    /// Sinusoidal wall motion along the normal (mm), 0 = rigid.
    pub deformation_amplitude: f64,
    pub deformation_period: f64,
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self {
            pixel_sigma: 0.5,
            max_range: 50.0,
            min_depth: 1.0,
            max_view_angle_deg: 80.0,
            max_incidence_deg: 80.0,
            n_octaves: 4,
            octave_base_px: 6.0,
            deformation_amplitude: 0.0,
            deformation_period: 90.0,
        }
    }
}

impl SensorSpec {
    pub fn octave_sigma(&self, octave: u8) -> f64 {
        self.pixel_sigma * f64::powi(2.0, octave as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFrame {
    pub frame_id: u64,
    pub timestamp: f64,
    /// Camera-from-world.
    pub gt_pose: SE3Pose,
    pub keypoints: Vec<KeyPoint>,
    /// Landmark id per keypoint, −1 for spurious ones.
    pub gt_landmarks: Vec<LandmarkTag>,
    pub intensity: IntensityGrid,
}

impl SyntheticFrame {
    pub fn to_frame(&self) -> Frame {
        let mut f = Frame::new(self.frame_id, self.timestamp, self.keypoints.clone());
        f.gt_landmarks = Some(self.gt_landmarks.clone());
        f
    }
}

/// Landmark position at `frame` under the optional deformation.
pub fn landmark_position(scene: &Scene, sensor: &SensorSpec, id: usize, frame: u64) -> Vector3<f64> {
    let l = &scene.landmarks[id];
    if sensor.deformation_amplitude == 0.0 {
        return l.position;
    }
    let a = TAU * frame as f64 / sensor.deformation_period.max(1.0) + l.phase;
    l.position + l.normal * (sensor.deformation_amplitude * a.sin())
}

fn noisy_descriptor(d: &Descriptor, sigma: f64, rng: &mut ChaCha8Rng) -> Descriptor {
    if sigma <= 0.0 {
        return d.clone();
    }
    let n = Normal::new(0.0, sigma).unwrap();
    let mut v = [0.0; DESCRIPTOR_LEN];
    for (o, x) in v.iter_mut().zip(d.values()) {
        *o = x + n.sample(rng);
    }
    Descriptor::normalized(v).unwrap_or_else(|_| d.clone())
}

/// Projects every visible landmark, adds the sensor noise and the clutter of
/// this frame. Pure function of its arguments.
#[allow(clippy::too_many_arguments)]
pub fn render_frame(
    scene: &Scene,
    pose: &SE3Pose,
    camera: &FisheyeCamera,
    sensor: &SensorSpec,
    clutter: &ClutterSpec,
    frame_id: u64,
    timestamp: f64,
    seed: u64,
) -> SyntheticFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, frame_id));
    let center = pose.center();
    let cos_view = sensor.max_view_angle_deg.to_radians().cos();
    let cos_inc = sensor.max_incidence_deg.to_radians().cos();
    let dropout = clutter.dropout_at(frame_id as usize);
    let first = scene.landmarks.partition_point(|l| l.s < center.z - sensor.max_range);
    let mut items: Vec<(KeyPoint, LandmarkTag)> = Vec::new();
    for (i, l) in scene.landmarks.iter().enumerate().skip(first) {
        if l.s > center.z + sensor.max_range {
            break;
        }
        let p = landmark_position(scene, sensor, i, frame_id);
        let to_cam = center - p;
        let dist = to_cam.norm();
        if dist > sensor.max_range || to_cam.dot(&l.normal) < cos_inc * dist {
            continue;
        }
        let pc = pose.transform_point(&p);
        if pc.z < sensor.min_depth || pc.z < cos_view * dist {
            continue;
        }
        let Ok(px) = camera.project(&pc) else { continue };
        let size_px = camera.focal() * l.size / dist;
        let octave = if size_px < sensor.octave_base_px {
            0
        } else {
            ((size_px / sensor.octave_base_px).log2().floor() as u8 + 1).min(sensor.n_octaves - 1)
        };
        let sigma = sensor.octave_sigma(octave);
        let noise = if sigma > 0.0 {
            let n = Normal::new(0.0, sigma).unwrap();
            loop {
                let e = Vector2::new(n.sample(&mut rng), n.sample(&mut rng));
                if e.norm() <= 5.0 * sigma {
                    break e;
                }
            }
        } else {
            Vector2::zeros()
        };
        let pixel = px + noise;
        // draw every random number before the visibility decisions below so
        // that clutter does not shift the noise of other landmarks
        let descriptor = noisy_descriptor(&l.descriptor, clutter.descriptor_sigma, &mut rng);
        let intensity = rng.random_range(0.1..0.7);
        let dropped = dropout > 0.0 && rng.random_bool(dropout.min(1.0));
        if !camera.contains(&pixel) || dropped {
            continue;
        }
        items.push((KeyPoint { pixel, octave, descriptor, intensity }, l.id as LandmarkTag));
    }
    if clutter.specular_rate > 0.0 {
        let count = Poisson::new(clutter.specular_rate).map(|p| p.sample(&mut rng) as usize).unwrap_or(0);
        for _ in 0..count {
            let pixel = Vector2::new(rng.random_range(0.0..camera.width as f64), rng.random_range(0.0..camera.height as f64));
            items.push((
                KeyPoint {
                    pixel,
                    octave: rng.random_range(0..sensor.n_octaves),
                    descriptor: random_descriptor(&mut rng, scene.spec.descriptor_density),
                    intensity: rng.random_range(0.95..1.0),
                },
                -1,
            ));
        }
    }
    // raster order, as a detector would report them
    items.sort_by(|a, b| (a.0.pixel.y, a.0.pixel.x).partial_cmp(&(b.0.pixel.y, b.0.pixel.x)).unwrap());
    let (keypoints, gt_landmarks): (Vec<KeyPoint>, Vec<LandmarkTag>) = items.into_iter().unzip();
    let intensity = IntensityGrid::from_keypoints(camera.width, camera.height, &keypoints);
    SyntheticFrame { frame_id, timestamp, gt_pose: *pose, keypoints, gt_landmarks, intensity }
}
