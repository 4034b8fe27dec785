use std::f64::consts::TAU;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::geometry::derive_seed;
use crate::map::{Descriptor, DESCRIPTOR_LEN};

/// Tube around a gently bending centerline `c(s) = (a₁ sin(2πs/p₁), a₂ sin(2πs/p₂ + 0.7), s)`
/// with radius `r(s) = r₀ (1 + v sin(2πs/p₃))`. Lengths in mm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub length: f64,
    pub bend_amplitude: [f64; 2],
    pub bend_period: [f64; 2],
    pub radius: f64,
    pub radius_variation: f64,
    pub radius_period: f64,
    pub n_landmarks: usize,
    pub descriptor_seed: u64,
    /// Fraction of nonzero descriptor components.
    pub descriptor_density: f64,
    /// Physical feature size range (mm), log-uniform; sets the octave.
    pub feature_size: [f64; 2],
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            length: 1200.0,
            bend_amplitude: [20.0, 15.0],
            bend_period: [600.0, 450.0],
            radius: 15.0,
            radius_variation: 0.1,
            radius_period: 230.0,
            n_landmarks: 9000,
            descriptor_seed: 7,
            descriptor_density: 0.25,
            feature_size: [0.15, 1.2],
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidInput(m.into()));
        if self.n_landmarks == 0 {
            return bad("zero landmarks");
        }
        if !(self.length > 0.0 && self.radius > 0.0) {
            return bad("tube length and radius must be positive");
        }
        if !(0.0..1.0).contains(&self.radius_variation) {
            return bad("radius variation must be in [0, 1)");
        }
        if self.bend_period.iter().chain([&self.radius_period]).any(|p| !(*p > 0.0)) {
            return bad("periods must be positive");
        }
        if !(self.descriptor_density > 0.0 && self.descriptor_density <= 1.0) {
            return bad("descriptor density must be in (0, 1]");
        }
        if !(self.feature_size[0] > 0.0 && self.feature_size[1] >= self.feature_size[0]) {
            return bad("bad feature size range");
        }
        Ok(())
    }

    pub fn center(&self, s: f64) -> Vector3<f64> {
        let [a1, a2] = self.bend_amplitude;
        let [p1, p2] = self.bend_period;
        Vector3::new(a1 * (TAU * s / p1).sin(), a2 * (TAU * s / p2 + 0.7).sin(), s)
    }

    pub fn tangent(&self, s: f64) -> Vector3<f64> {
        let [a1, a2] = self.bend_amplitude;
        let [p1, p2] = self.bend_period;
        Vector3::new(a1 * TAU / p1 * (TAU * s / p1).cos(), a2 * TAU / p2 * (TAU * s / p2 + 0.7).cos(), 1.0).normalize()
    }

    /// Orthonormal cross-section axes `(n₁, n₂)` at `s`.
    pub fn section_axes(&self, s: f64) -> (Vector3<f64>, Vector3<f64>) {
        let t = self.tangent(s);
        let n1 = (Vector3::x() - t * t.x).normalize();
        (n1, t.cross(&n1))
    }

    pub fn radius_at(&self, s: f64) -> f64 {
        self.radius * (1.0 + self.radius_variation * (TAU * s / self.radius_period).sin())
    }

    pub fn surface_point(&self, s: f64, phi: f64) -> Vector3<f64> {
        let (n1, n2) = self.section_axes(s);
        self.center(s) + self.radius_at(s) * (phi.cos() * n1 + phi.sin() * n2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Landmark {
    pub id: u32,
    pub s: f64,
    pub phi: f64,
    pub position: Vector3<f64>,
    /// Unit normal pointing into the tube.
    pub normal: Vector3<f64>,
    pub descriptor: Descriptor,
    pub size: f64,
    /// Phase of the optional deformation.
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    /// Sorted by `s`.
    pub landmarks: Vec<Landmark>,
}

impl Scene {
    /// Landmarks with `s` in `[lo, hi]`.
    pub fn landmarks_between(&self, lo: f64, hi: f64) -> &[Landmark] {
        let a = self.landmarks.partition_point(|l| l.s < lo);
        let b = self.landmarks.partition_point(|l| l.s <= hi);
        &self.landmarks[a..b.max(a)]
    }
}

/// Random sparse non-negative unit vector.
pub fn random_descriptor(rng: &mut impl Rng, density: f64) -> Descriptor {
    loop {
        let mut v = [0.0; DESCRIPTOR_LEN];
        for x in v.iter_mut() {
            if rng.random_bool(density) {
                *x = rng.random_range(0.0..1.0);
            }
        }
        if let Ok(d) = Descriptor::normalized(v) {
            return d;
        }
    }
}

/// Places landmarks uniformly over the tube wall (area-weighted by the local
/// radius) and draws their descriptors from the descriptor seed.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene, SimError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5ce7e));
    let mut drng = ChaCha8Rng::seed_from_u64(derive_seed(spec.descriptor_seed, seed));
    let r_max = spec.radius * (1.0 + spec.radius_variation);
    let (ln_lo, ln_hi) = (spec.feature_size[0].ln(), spec.feature_size[1].ln());
    let mut landmarks = Vec::with_capacity(spec.n_landmarks);
    while landmarks.len() < spec.n_landmarks {
        let s = rng.random_range(0.0..spec.length);
        if rng.random_range(0.0..r_max) > spec.radius_at(s) {
            continue;
        }
        let phi = rng.random_range(0.0..TAU);
        let position = spec.surface_point(s, phi);
        let normal = (spec.center(s) - position).normalize();
        let size = if ln_hi > ln_lo { rng.random_range(ln_lo..ln_hi).exp() } else { spec.feature_size[0] };
        landmarks.push(Landmark {
            id: 0,
            s,
            phi,
            position,
            normal,
            descriptor: random_descriptor(&mut drng, spec.descriptor_density),
            size,
            phase: rng.random_range(0.0..TAU),
        });
    }
    landmarks.sort_by(|a, b| a.s.total_cmp(&b.s));
    for (i, l) in landmarks.iter_mut().enumerate() {
        l.id = i as u32;
    }
    Ok(Scene { spec: spec.clone(), landmarks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneSpec {
        SceneSpec { n_landmarks: 1000, length: 200.0, ..Default::default() }
    }

    #[test]
    fn landmarks_lie_on_the_surface() {
        let spec = small();
        let scene = generate_scene(&spec, 1).unwrap();
        assert_eq!(scene.landmarks.len(), 1000);
        for l in &scene.landmarks {
            let d = l.position - spec.center(l.s);
            assert!((d.norm() - spec.radius_at(l.s)).abs() < 1e-9);
            assert!(d.dot(&spec.tangent(l.s)).abs() < 1e-9);
            assert!((l.normal.norm() - 1.0).abs() < 1e-12);
        }
        assert!(scene.landmarks.windows(2).all(|w| w[0].s <= w[1].s));
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_scene(&small(), 5).unwrap();
        let b = generate_scene(&small(), 5).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&small(), 6).unwrap();
        assert_ne!(a.landmarks[0].position, c.landmarks[0].position);
    }

    #[test]
    fn zero_landmarks_rejected() {
        let spec = SceneSpec { n_landmarks: 0, ..Default::default() };
        assert!(matches!(generate_scene(&spec, 0), Err(SimError::InvalidInput(_))));
    }

    #[test]
    fn descriptor_similarity_matches_independent_sampling() {
        let scene = generate_scene(&small(), 2).unwrap();
        let d: Vec<&Descriptor> = scene.landmarks.iter().map(|l| &l.descriptor).collect();
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in 0..d.len() {
            for j in (i + 1)..d.len().min(i + 40) {
                sum += d[i].dot(d[j]);
                n += 1;
            }
        }
        let scene_mean = sum / n as f64;
        // independent draws from the same distribution
        let mut rng = ChaCha8Rng::seed_from_u64(999);
        let m = 20_000;
        let mc: f64 = (0..m)
            .map(|_| random_descriptor(&mut rng, 0.25).dot(&random_descriptor(&mut rng, 0.25)))
            .sum::<f64>()
            / m as f64;
        assert!((scene_mean - mc).abs() < 0.01, "{scene_mean} vs {mc}");
        assert!(d.iter().all(|x| x.values().iter().all(|v| *v >= 0.0) && (x.norm() - 1.0).abs() < 1e-9));
    }

    #[test]
    fn range_query() {
        let scene = generate_scene(&small(), 3).unwrap();
        let sub = scene.landmarks_between(50.0, 60.0);
        assert!(!sub.is_empty());
        assert!(sub.iter().all(|l| l.s >= 50.0 && l.s <= 60.0));
        let expected = scene.landmarks.iter().filter(|l| l.s >= 50.0 && l.s <= 60.0).count();
        assert_eq!(sub.len(), expected);
    }
}
